"""Numerical experiments for the approximation claims, a scaling benchmark,
and a seeded ZINB generator used as a desk-scale clustering benchmark."""

from __future__ import annotations

import math
import timeit
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import attention as at
from . import diffkernels as dk
from .errors import ConstructionError
from .ingest import ExpressionMatrix, from_counts


# -- random projection (JL) ----------------------------------------------------------


def jl_dimension(n_prime: int, epsilon: float) -> int:
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    return max(1, math.ceil(5.0 * math.log(n_prime) / (epsilon ** 2 - epsilon ** 3)))


@dataclass
class JlTrialConfig:
    n: int = 1024
    n_prime: int = 256
    epsilon: float = 0.5
    trials: int = 1000
    seed: int = 0
    m_jl: int | None = None  # overrides the rate-derived projection size
    score_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")

    @property
    def projection_dim(self) -> int:
        return self.m_jl if self.m_jl is not None else jl_dimension(self.n_prime, self.epsilon)


def _random_attention(rng, rows, cols, scale):
    S = rng.standard_normal((rows, cols)) * scale
    S -= S.max(axis=1, keepdims=True)
    A = np.exp(S)
    return A / A.sum(axis=1, keepdims=True)


def jl_trial_errors(cfg: JlTrialConfig) -> np.ndarray:
    """Relative error ``||A R^T R w - A w|| / ||A w||`` for every trial."""
    rng = np.random.default_rng(cfg.seed)
    k = cfg.projection_dim
    errs = np.empty(cfg.trials)
    for t in range(cfg.trials):
        A = _random_attention(rng, cfg.n_prime, cfg.n, cfg.score_scale)
        w = rng.standard_normal(cfg.n)
        w /= np.linalg.norm(w)
        R = rng.standard_normal((k, cfg.n)) / math.sqrt(k)
        exact = A @ w
        approx = A @ (R.T @ (R @ w))
        errs[t] = np.linalg.norm(approx - exact) / np.linalg.norm(exact)
    return errs


def jl_experiment(cfg: JlTrialConfig) -> float:
    """Fraction of trials where the projected product is within ``epsilon``."""
    return float(np.mean(jl_trial_errors(cfg) <= cfg.epsilon))


def jl_inner_product_experiment(cfg: JlTrialConfig) -> float:
    """Fraction of trials where every attention row keeps its inner product with ``w``.

    Checks ``|<R a_i, R w> - <a_i, w>| <= eps ||a_i|| ||w||`` for all rows,
    which is the per-pair guarantee random projections actually provide.
    """
    rng = np.random.default_rng(cfg.seed)
    k = cfg.projection_dim
    ok = 0
    for _ in range(cfg.trials):
        A = _random_attention(rng, cfg.n_prime, cfg.n, cfg.score_scale)
        w = rng.standard_normal(cfg.n)
        w /= np.linalg.norm(w)
        R = rng.standard_normal((k, cfg.n)) / math.sqrt(k)
        err = np.abs(A @ (R.T @ (R @ w)) - A @ w)
        ok += bool(np.all(err <= cfg.epsilon * np.linalg.norm(A, axis=1)))
    return ok / cfg.trials


# -- bipartite vs full attention without softmax ----------------------------------------


@dataclass
class EquivalenceConfig:
    n: int = 64
    m: int = 8
    d: int = 16
    d_k: int = 16
    seed: int = 0
    delta: float = 0.0
    identity_mixture: bool = False  # requires n == m; cells are the anchors themselves


@dataclass
class EquivalenceResult:
    max_abs_diff: float
    softmax_gap: float
    scale: float  # max |Z_hat|, for reading the difference in relative terms


def _construct(cfg: EquivalenceConfig, rng):
    if cfg.m > cfg.n:
        raise ConstructionError("need m <= n")
    if cfg.m > cfg.d:
        raise ConstructionError("exact recovery needs m <= d (anchors must be linearly independent)")
    for _ in range(10):
        U = rng.standard_normal((cfg.m, cfg.d))
        if np.linalg.matrix_rank(U) == min(cfg.m, cfg.d):
            break
    else:
        raise ConstructionError("could not sample a full-rank anchor matrix")
    if cfg.identity_mixture:
        if cfg.n != cfg.m:
            raise ConstructionError("identity mixture requires n == m")
        C = np.eye(cfg.n)
    else:
        C = rng.dirichlet(np.ones(cfg.m), size=cfg.n)
    return U, C


def equivalence_report(cfg: EquivalenceConfig) -> EquivalenceResult:
    """Compare softmax-free full attention with softmax-free bipartite attention.

    Cells are built inside the anchors' row space, ``X = C U`` with a
    row-stochastic mixture ``C``.  Writing ``C^T C = R^T R`` (``R`` from a QR
    factorisation of ``C``), the feature-space map ``D = U^+ R U`` satisfies
    ``(U D)^T (U D) = U^T C^T C U = X^T X``, so choosing the anchor key/value
    projections ``D W_K`` and ``D W_V`` reproduces ``Q K^T V`` exactly.
    With ``delta > 0`` the cells are pushed off the row space by a Frobenius
    perturbation of that size while ``D`` stays fixed.
    """
    rng = np.random.default_rng(cfg.seed)
    U, C = _construct(cfg, rng)
    s = 1.0 / math.sqrt(cfg.d)
    W_Q = rng.standard_normal((cfg.d, cfg.d_k)) * s
    W_K = rng.standard_normal((cfg.d, cfg.d_k)) * s
    W_V = rng.standard_normal((cfg.d, cfg.d_k)) * s
    X = C @ U
    if cfg.delta > 0:
        E = rng.standard_normal(X.shape)
        X = X + cfg.delta * E / np.linalg.norm(E)

    R = np.linalg.qr(C, mode="r")
    D = np.linalg.pinv(U) @ R @ U
    W_k = D @ W_K
    W_v = D @ W_V

    Q = X @ W_Q
    Z_full = Q @ ((X @ W_K).T @ (X @ W_V))
    Z_bi = Q @ ((U @ W_k).T @ (U @ W_v))
    diff = float(np.max(np.abs(Z_full - Z_bi)))

    # supplementary: the same identification with softmax kept on both sides
    A, Z_soft_full = at.full_self_attention(X, at.FullAttentionParams(W_Q, W_K, W_V))
    _, Z_soft_bi = at.bipartite_head(X, U, at.BipartiteHead(W_Q, W_k, W_v), scale_scores=True)
    gap = float(np.max(np.abs(Z_soft_full.value - Z_soft_bi.value)))
    return EquivalenceResult(max_abs_diff=diff, softmax_gap=gap, scale=float(np.max(np.abs(Z_full))))


def equivalence_experiment(cfg: EquivalenceConfig) -> float:
    return equivalence_report(cfg).max_abs_diff


# -- scaling benchmark ------------------------------------------------------------------


@dataclass
class BenchRow:
    n: int
    method: str
    mean_ms: float | None
    std_ms: float | None
    flops: int | None
    min_ms: float | None = None

    @property
    def skipped(self) -> bool:
        return self.mean_ms is None


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)


def _time_calls(fns, reps):
    """Per-call milliseconds for each function, as (mean, std, min) over ``reps`` samples.

    Samples last at least 0.2 s and repetitions are interleaved across the
    functions, so drift in machine speed hits every function alike.
    """
    timers = [timeit.Timer(fn) for fn in fns]
    numbers = [t.autorange()[0] for t in timers]
    times = [[] for _ in fns]
    for _ in range(reps):
        for t, number, out in zip(timers, numbers, times):
            out.append(t.timeit(number) / number * 1e3)
    return [(float(np.mean(v)), float(np.std(v)), float(np.min(v))) for v in times]


def make_attention_inputs(n: int, d: int, m: int, l: int, d_k: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    U = rng.standard_normal((m, d))
    s = 1.0 / math.sqrt(d)
    heads = [
        at.BipartiteHead(rng.standard_normal((d, d_k)) * s, rng.standard_normal((d, d_k)) * s, rng.standard_normal((d, d_k)) * s)
        for _ in range(l)
    ]
    bi = at.BipartiteAttentionParams(heads=heads, W_c=rng.standard_normal((d, l * d_k)) * s)
    full = at.FullAttentionParams(*(rng.standard_normal((d, d_k)) * s for _ in range(3)))
    return X, U, bi, full


def bipartite_flops(n: int, d: int, m: int, l: int, d_k: int) -> int:
    X, U, bi, _ = make_attention_inputs(n, d, m, l, d_k)
    with dk.count_flops() as fc:
        at.multi_head_bipartite(X, U, bi)
    return fc.total


def full_attention_flops(n: int, d: int, d_k: int):
    """Return ``(total, score_product)`` operation counts for full attention."""
    X, _, _, full = make_attention_inputs(n, d, 1, 1, d_k)
    with dk.count_flops() as fc:
        at.full_self_attention(X, full)
    score = sum(f for op, f, shape in fc.events if op == "matmul" and shape == (n, n) and f == 2 * n * n * d_k)
    return fc.total, score


def loglog_slope(ns, times) -> float:
    return float(np.polyfit(np.log(ns), np.log(times), 1)[0])


def scaling_benchmark(sizes, d=64, m=64, l=4, d_k=32, reps=5, full_cap=8192, seed=0, threads=1) -> BenchReport:
    """Time forward passes of bipartite and full attention over increasing ``n``.

    BLAS is pinned to ``threads`` lanes while timing, and repetitions are
    interleaved across sizes.  Full attention is skipped for ``n > full_cap``.  Slopes are least-squares fits of
    log(time) on log(n) using the fastest repetition at each size, which is
    the least disturbed by other load; they are reported only when a method
    ran at two or more sizes.
    """
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    report = BenchReport(params={"d": d, "m": m, "l": l, "d_k": d_k, "reps": reps, "full_cap": full_cap, "seed": seed})
    jobs = []
    for n in sizes:
        X, U, bi, full = make_attention_inputs(n, d, m, l, d_k, seed)
        with dk.count_flops() as fc:
            at.multi_head_bipartite(X, U, bi)
        jobs.append((n, "bipartite", fc.total, lambda X=X, U=U, bi=bi: at.multi_head_bipartite(X, U, bi)))
        if n <= full_cap:
            with dk.count_flops() as fc:
                at.full_self_attention(X, full)
            jobs.append((n, "full", fc.total, lambda X=X, full=full: at.full_self_attention(X, full)))
    with threadpool_limits(limits=threads):
        stats = _time_calls([j[3] for j in jobs], reps)
    timed = {(n, method): (flops, st) for (n, method, flops, _), st in zip(jobs, stats)}
    for n in sizes:
        for method in ("bipartite", "full"):
            if (n, method) in timed:
                flops, (mean, std, best) = timed[n, method]
                report.rows.append(BenchRow(n, method, mean, std, flops, best))
            else:
                report.rows.append(BenchRow(n, method, None, None, None))
    for method in ("bipartite", "full"):
        ran = [r for r in report.rows if r.method == method and not r.skipped]
        if len(ran) >= 2:
            report.slopes[method] = loglog_slope([r.n for r in ran], [r.min_ms for r in ran])
    return report


def write_bench(report: BenchReport, csv_path, json_path) -> None:
    import csv
    import json

    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "method", "mean_ms", "std_ms", "flops", "min_ms"])
        for r in report.rows:
            if r.skipped:
                w.writerow([r.n, r.method] + ["skipped"] * 4)
            else:
                w.writerow([r.n, r.method, repr(r.mean_ms), repr(r.std_ms), r.flops, repr(r.min_ms)])
    with open(json_path, "w") as fh:
        json.dump({"slopes": report.slopes, "params": report.params}, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- synthetic data -----------------------------------------------------------------------


def zinb_sample(mu, theta, pi, rng: np.random.Generator) -> np.ndarray:
    """Draw ZINB counts: gamma-Poisson NB with mean ``mu``, then zero with prob ``pi``."""
    mu = np.asarray(mu, dtype=np.float64)
    lam = rng.gamma(shape=theta, scale=mu / theta)
    counts = rng.poisson(lam)
    drop = rng.random(mu.shape) < pi
    counts[drop] = 0
    return counts


def synth_generate(n: int, K: int, d: int, de_genes: int, seed: int, base_mean: float = 1.0,
                   fold: float = 8.0, pi: float = 0.3, theta: float = 2.0):
    """Balanced ZINB clusters, each with its own block of up-regulated genes.

    Every gene gets a log-normal baseline mean around ``base_mean``; cluster
    ``k`` multiplies genes ``k*de_genes .. (k+1)*de_genes - 1`` by ``fold``.
    Returns ``(ExpressionMatrix, labels)``; the per-cluster mean profiles are
    kept in ``em.meta["cluster_means"]``.
    """
    if K < 1 or de_genes * K > d:
        raise ValueError("need K >= 1 and de_genes * K <= d")
    rng = np.random.default_rng(seed)
    baseline = base_mean * np.exp(0.25 * rng.standard_normal(d))
    means = np.tile(baseline, (K, 1))
    for k in range(K):
        means[k, k * de_genes:(k + 1) * de_genes] *= fold
    sizes = np.full(K, n // K)
    sizes[: n % K] += 1
    labels = rng.permutation(np.repeat(np.arange(K), sizes))
    counts = zinb_sample(means[labels], theta, pi, rng)
    em = from_counts(counts)
    em.meta["cluster_means"] = means
    return em, labels
