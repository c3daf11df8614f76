"""Model assembly, the two-phase training loop, evaluation and output files."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import anchors as an
from . import attention as at
from . import clustering as cl
from . import diffkernels as dk
from .errors import DegenerateCluster, NonFinite, ShapeMismatch
from .ingest import ExpressionMatrix

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    m: int = 256
    l: int = 4
    d_k: int = 64
    d_u: int = 64
    d_h: int = 64
    K: int = 2
    warmup_epochs: int = 20
    w_s: float = 1.0
    w_c: float = 1.0
    w_a: float = 1.0
    disable_L_a: bool = False
    disable_L_s: bool = False
    scale_scores: bool = False
    update_target_every: int = 0  # optimizer steps; 0 means once per epoch
    alpha: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    use_decoder: bool = False
    d_z: int = 64
    size_factor_mu: bool = False
    anchor_grad_from_attention: bool = False
    dead_anchor_noise: float = 1e-2
    eval_batch_size: int = 4096

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if min(self.w_s, self.w_c, self.w_a) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        for name in ("m", "l", "d_k", "d_u", "d_h", "d_z"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.warmup_epochs < 0 or self.update_target_every < 0:
            raise ValueError("warmup_epochs and update_target_every must be >= 0")

    # key=value text form --------------------------------------------------

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _coerce(kinds[key], val, key)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())


def _coerce(kind, val: str, key: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = val.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(val)
        if kind == "int":
            return int(val)
        if kind == "float":
            return float(val)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {val!r} as {kind}") from None
    return val


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


class Adam:
    """Adaptive-moment gradient descent over a :class:`~bgformer.diffkernels.ParamStore`."""

    def __init__(self, store: dk.ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def reset(self, name: str) -> None:
        self.m.pop(name, None)
        self.v.pop(name, None)

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.store:
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class BGFormer:
    """All trainable state: attention, anchor codebook, encoder, ZINB heads, centroids."""

    def __init__(self, d: int, cfg: TrainConfig):
        self.d = d
        self.cfg = cfg
        store = self.store = dk.ParamStore(cfg.seed)
        for i in range(cfg.l):
            store.add(f"attn.{i}.W_p", d, cfg.d_k)
            store.add(f"attn.{i}.W_k", cfg.d_u, cfg.d_k)
            store.add(f"attn.{i}.W_v", cfg.d_u, cfg.d_h)
        store.add("attn.W_c", d, cfg.l * cfg.d_h)
        store.add("enc.W_e", d, cfg.d_u)
        store.add("enc.b_e", 1, cfg.d_u, init="zeros")
        head_in = cfg.d_u
        if cfg.use_decoder:
            store.add("dec.W_d", cfg.d_u, cfg.d_z)
            store.add("dec.b_d", 1, cfg.d_z, init="zeros")
            head_in = cfg.d_z
        an.ZinbHeads.create(store, "anchor_zinb", head_in, d)
        an.ZinbHeads.create(store, "ss_zinb", cfg.l * cfg.d_h, d)
        store.add("U", cfg.m, cfg.d_u, init="zeros")

    @classmethod
    def from_values(cls, d: int, cfg: TrainConfig, values: dict) -> "BGFormer":
        model = cls(d, cfg)
        for name, v in values.items():
            if name in model.store:
                if model.store[name].shape != v.shape:
                    raise ShapeMismatch(f"checkpoint {name} has shape {v.shape}, expected {model.store[name].shape}")
                model.store[name].value = v.copy()
            else:
                model.store.set(name, v)
        return model

    # structured views over the store ----------------------------------------

    @property
    def attention(self) -> at.BipartiteAttentionParams:
        s = self.store
        heads = [at.BipartiteHead(s[f"attn.{i}.W_p"], s[f"attn.{i}.W_k"], s[f"attn.{i}.W_v"]) for i in range(self.cfg.l)]
        return at.BipartiteAttentionParams(heads=heads, W_c=s["attn.W_c"], scale_scores=self.cfg.scale_scores)

    @property
    def enc(self) -> an.AnchorEncoderDecoder:
        s = self.store
        heads = an.ZinbHeads.from_store(s, "anchor_zinb")
        if self.cfg.use_decoder:
            return an.AnchorEncoderDecoder(s["enc.W_e"], s["enc.b_e"], heads, s["dec.W_d"], s["dec.b_d"])
        return an.AnchorEncoderDecoder(s["enc.W_e"], s["enc.b_e"], heads)

    @property
    def ss_heads(self) -> an.ZinbHeads:
        return an.ZinbHeads.from_store(self.store, "ss_zinb")

    @property
    def codebook(self) -> an.AnchorCodebook:
        return an.AnchorCodebook(self.store["U"])

    @property
    def clusters(self) -> cl.ClusterState | None:
        if "centroids" not in self.store:
            return None
        return cl.ClusterState(self.store["centroids"], alpha=self.cfg.alpha)

    def set_centroids(self, C: np.ndarray) -> None:
        self.store.set("centroids", C)

    # forward passes ----------------------------------------------------------

    def _anchor_view(self):
        U = self.store["U"]
        if self.cfg.anchor_grad_from_attention:
            return U
        return dk.Var(U.value)

    def embed(self, X):
        """Bipartite attention maps and clustering embeddings for a batch."""
        X = dk.as_var(X)
        if X.shape[1] != self.d:
            raise ShapeMismatch(f"input has {X.shape[1]} genes, model expects {self.d}")
        return at.bipartite_embed(X, self._anchor_view(), self.attention)

    def encode(self, X):
        return an.encode(X, self.enc)

    def embed_all(self, X: np.ndarray, batch_size: int | None = None) -> np.ndarray:
        bs = batch_size or self.cfg.eval_batch_size
        out = [self.embed(X[i:i + bs])[1].value for i in range(0, X.shape[0], bs)]
        return np.vstack(out)

    def encode_all(self, X: np.ndarray, batch_size: int | None = None) -> np.ndarray:
        bs = batch_size or self.cfg.eval_batch_size
        return np.vstack([self.encode(X[i:i + bs]).value for i in range(0, X.shape[0], bs)])

    def soft_assign_all(self, X: np.ndarray, batch_size: int | None = None):
        Z = self.embed_all(X, batch_size)
        return Z, cl.soft_assign(Z, self.clusters).value


@dataclass
class Batch:
    X: np.ndarray
    counts: np.ndarray
    size_factors: np.ndarray | None = None
    P: np.ndarray | None = None  # DEC target rows; None during warm-up


def total_loss(batch: Batch, model: BGFormer, routing=None):
    """Weighted sum ``w_s L_s + w_c L_c + w_a L_a`` for one batch.

    Follows the per-step order: bipartite embedding, encoding, anchor
    assignment, residual embedding, losses.  ``L_c`` is zero while
    ``batch.P`` is ``None`` (warm-up).  Returns ``(L, parts, anchor_indices)``
    with ``parts`` holding the unweighted 1x1 Vars.
    """
    cfg = model.cfg
    X = dk.Var(batch.X)
    _, Z_out = at.multi_head_bipartite(X, model._anchor_view(), model.attention)
    H = model.encode(X)
    sf = batch.size_factors if cfg.size_factor_mu else None
    zero = dk.Var(np.zeros((1, 1)))
    terms = []

    idx = None
    if cfg.disable_L_a:
        L_a = zero
    else:
        L_a, _, idx = an.anchor_loss(batch.counts, H, model.codebook, model.enc, size_factors=sf, routing=routing)
        terms.append((cfg.w_a, L_a))
    if idx is None:
        idx, _ = an.assign(H, model.codebook) if routing is None else (routing[0], None)

    Z = at.residual_embed(X, Z_out, model.store["attn.W_c"])

    if cfg.disable_L_s:
        L_s = zero
    else:
        zp = an.zinb_heads(Z, model.ss_heads)
        if sf is not None:
            zp = an.ZinbParams(pi=zp.pi, mu=dk.scale_rows(zp.mu, sf), theta=zp.theta)
        L_s = an.zinb_nll(batch.counts, zp)
        terms.append((cfg.w_s, L_s))

    if batch.P is None:
        L_c = zero
    else:
        Q = cl.soft_assign(Z, model.clusters)
        L_c = cl.dec_loss(batch.P, Q)
        terms.append((cfg.w_c, L_c))

    for name, part in (("L_s", L_s), ("L_c", L_c), ("L_a", L_a)):
        if not math.isfinite(part.value.item()):
            raise NonFinite(f"{name} is not finite")
    L = dk.weighted_sum(terms) if terms else zero
    return L, {"L_s": L_s, "L_c": L_c, "L_a": L_a}, idx


@dataclass
class TrainResult:
    model: BGFormer
    labels: np.ndarray
    history: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    Z: np.ndarray | None = None


def _batches(order: np.ndarray, size: int):
    for i in range(0, order.size, size):
        yield order[i:i + size]


def train(em: ExpressionMatrix, cfg: TrainConfig, truth=None, echo=None) -> TrainResult:
    """Two-phase mini-batch training.

    Warm-up epochs optimise ``w_s L_s + w_a L_a``; then centroids are set by
    k-means on full-data embeddings and the full objective is optimised.
    ``echo`` receives one human-readable line per epoch.
    """
    X = np.ascontiguousarray(em.processed, dtype=np.float64)
    counts = em.hvg_counts.astype(np.float64)
    sf = em.size_factors
    n, d = X.shape
    if n < cfg.K:
        raise cl.InsufficientCells(f"{n} cells for {cfg.K} clusters")

    model = BGFormer(d, cfg)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.store, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = []
    P_full = None
    degenerate_retry = False
    last_good = None
    kmeans_labels = None
    step = 0

    def start_clustering():
        nonlocal kmeans_labels
        Z = model.embed_all(X)
        C, kmeans_labels = cl.kmeans(Z, cfg.K, cfg.seed)
        model.set_centroids(C)
        opt.reset("centroids")

    def refresh_target():
        nonlocal P_full, degenerate_retry
        _, Q = model.soft_assign_all(X)
        try:
            P_full = cl.target_distribution(Q)
        except DegenerateCluster:
            if degenerate_retry:
                raise
            degenerate_retry = True
            log.warning("degenerate cluster; re-initialising centroids")
            start_clustering()
            _, Q = model.soft_assign_all(X)
            P_full = cl.target_distribution(Q)

    for epoch in range(cfg.epochs):
        joint = epoch >= cfg.warmup_epochs
        if joint and epoch == cfg.warmup_epochs:
            start_clustering()
        if joint and cfg.update_target_every == 0:
            refresh_target()
        order = rng.permutation(n)
        if epoch == 0:
            first = order[: cfg.batch_size]
            model.store["U"].value = an.init_codebook(model.encode(X[first]).value, cfg.m, rng)
        usage = np.zeros(cfg.m, dtype=np.int64)
        sums = np.zeros(4)
        nb = 0
        last_rows = None
        for rows in _batches(order, cfg.batch_size):
            if joint and cfg.update_target_every > 0 and (P_full is None or step % cfg.update_target_every == 0):
                refresh_target()
            batch = Batch(X[rows], counts[rows], sf[rows] if sf is not None else None, P_full[rows] if joint else None)
            model.store.zero_grad()
            try:
                with dk.Tape() as tape:
                    L, parts, idx = total_loss(batch, model)
                    tape.backward(L)
                for name, p in model.store:
                    if not np.all(np.isfinite(p.grad)):
                        raise NonFinite(f"gradient of {name} is not finite")
            except NonFinite as exc:
                raise NonFinite(f"epoch {epoch}: {exc}", last_good=last_good) from exc
            opt.step()
            step += 1
            usage += np.bincount(idx, minlength=cfg.m)
            sums += [L.value.item(), parts["L_s"].value.item(), parts["L_c"].value.item(), parts["L_a"].value.item()]
            nb += 1
            last_rows = None if cfg.disable_L_a else rows
        if not cfg.disable_L_a and last_rows is not None:
            moved = an.reinit_dead(model.store["U"].value, usage, model.encode(X[last_rows]).value, rng, cfg.dead_anchor_noise)
            if moved:
                opt.reset("U")
                log.debug("epoch %d: re-initialised %d dead anchors", epoch, moved)
        mean = sums / nb
        history.append({"epoch": epoch, "L": mean[0], "L_s": mean[1], "L_c": mean[2], "L_a": mean[3]})
        if not all(math.isfinite(v) for v in mean):
            raise NonFinite(f"epoch {epoch}: non-finite mean loss", last_good=last_good)
        last_good = model.store.snapshot()
        if echo is not None:
            echo(f"epoch {epoch + 1}/{cfg.epochs} L={mean[0]:.6g} L_s={mean[1]:.6g} L_c={mean[2]:.6g} L_a={mean[3]:.6g}")

    if cfg.epochs <= cfg.warmup_epochs:
        # warm-up only: labels come from k-means on the post-warm-up embeddings
        start_clustering()
        Z = model.embed_all(X)
        labels = kmeans_labels
    else:
        Z, Q = model.soft_assign_all(X)
        labels = cl.predict_labels(Q)
    metrics = compute_metrics(labels, truth, cfg.K)
    return TrainResult(model=model, labels=labels, history=history, metrics=metrics, Z=Z)


def compute_metrics(labels, truth=None, K=None) -> dict:
    labels = np.asarray(labels)
    K = int(K if K is not None else labels.max() + 1)
    out = {"n": int(labels.size), "K": K, "cluster_sizes": np.bincount(labels, minlength=K).tolist()}
    if truth is not None:
        truth = np.asarray(truth)
        if truth.shape != labels.shape:
            raise ShapeMismatch(f"{truth.size} truth labels for {labels.size} cells")
        out["acc"] = cl.metric_acc(labels, truth)
        out["ari"] = cl.metric_ari(labels, truth)
    return out


def evaluate(model: BGFormer, em: ExpressionMatrix, truth=None, batch_size=None, with_attention=False) -> dict:
    """Full-data embeddings, soft assignments, labels and metrics."""
    X = np.ascontiguousarray(em.processed, dtype=np.float64)
    if X.shape[1] != model.d:
        raise ShapeMismatch(f"data has {X.shape[1]} genes, model expects {model.d}")
    if model.clusters is None:
        raise ValueError("model has no cluster centroids (training never left warm-up)")
    Z, Q = model.soft_assign_all(X, batch_size)
    labels = cl.predict_labels(Q)
    result = {"Z": Z, "Q": Q, "labels": labels, "metrics": compute_metrics(labels, truth, model.cfg.K)}
    if with_attention:
        bs = batch_size or model.cfg.eval_batch_size
        per_head = [[] for _ in range(model.cfg.l)]
        for i in range(0, X.shape[0], bs):
            B_list, _ = model.embed(X[i:i + bs])
            for h, B in enumerate(B_list):
                per_head[h].append(B.value)
        result["attention"] = [np.vstack(p) for p in per_head]
    return result


# -- files -------------------------------------------------------------------------


def save_model(out_dir, model: BGFormer) -> None:
    os.makedirs(out_dir, exist_ok=True)
    dk.save_checkpoint(os.path.join(out_dir, "checkpoint.bgf"), model.store.snapshot())
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# model input width d={model.d}\n")
        fh.write(model.cfg.to_text())


def load_model(model_dir) -> BGFormer:
    cfg_path = os.path.join(model_dir, "config.txt")
    with open(cfg_path, encoding="utf-8") as fh:
        text = fh.read()
    cfg = TrainConfig.from_text(text)
    values = dk.load_checkpoint(os.path.join(model_dir, "checkpoint.bgf"))
    d = values["enc.W_e"].shape[0]
    return BGFormer.from_values(d, cfg, values)


def write_matrix_csv(path, M) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(M):
            w.writerow([repr(float(v)) for v in row])


def write_labels(path, cell_ids, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for cid, lab in zip(cell_ids, labels):
            w.writerow([cid, int(lab)])


def write_metrics(path, metrics: dict) -> None:
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "L", "L_s", "L_c", "L_a"])
        for h in history:
            w.writerow([h["epoch"]] + [repr(float(h[k])) for k in ("L", "L_s", "L_c", "L_a")])


def write_codebook(out_dir, model: BGFormer, usage) -> None:
    U = model.store["U"].value
    write_matrix_csv(os.path.join(out_dir, "codebook.csv"), U)
    with open(os.path.join(out_dir, "codebook.json"), "w") as fh:
        json.dump({"m": int(U.shape[0]), "d_u": int(U.shape[1]), "usage_counts": [int(u) for u in usage]}, fh, indent=2)
        fh.write("\n")


def anchor_usage(model: BGFormer, X: np.ndarray) -> np.ndarray:
    H = model.encode_all(X)
    idx, _ = an.assign(H, model.codebook)
    return np.bincount(idx, minlength=model.cfg.m)


def write_outputs(out_dir, model: BGFormer, em: ExpressionMatrix, labels, metrics, history=None, Z=None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_model(out_dir, model)
    write_labels(os.path.join(out_dir, "labels.csv"), em.cell_ids, labels)
    write_metrics(os.path.join(out_dir, "metrics.json"), metrics)
    if history is not None:
        write_history(os.path.join(out_dir, "loss_history.csv"), history)
    if Z is None:
        Z = model.embed_all(em.processed)
    write_matrix_csv(os.path.join(out_dir, "embeddings.csv"), Z)
    write_codebook(out_dir, model, anchor_usage(model, em.processed))


def write_attention(out_dir, B_list, labels=None, K=None) -> list:
    """One CSV per head (cells x anchors) plus per-head class summaries."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for h, B in enumerate(B_list):
        path = os.path.join(out_dir, f"attention_head{h}.csv")
        write_matrix_csv(path, B)
        written.append(path)
        if labels is not None:
            path = os.path.join(out_dir, f"class_summary_head{h}.csv")
            write_matrix_csv(path, at.class_attention_summary(B, labels, K))
            written.append(path)
    return written
