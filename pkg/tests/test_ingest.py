import numpy as np
import pytest

from bgformer import ingest
from bgformer.errors import EmptyMatrix, InsufficientGenes, NegativeCount, ParseError, ZeroLibrary


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


class TestLoadCounts:
    def test_dense_csv(self, tmp_path):
        em = ingest.load_counts(_write(tmp_path, "a.csv", "1,0,2\n0,5,0\n"), "csv")
        assert em.raw_counts.tolist() == [[1, 0, 2], [0, 5, 0]]
        assert em.processed is None
        assert em.n_genes == 3

    def test_csv_header_detected(self, tmp_path):
        em = ingest.load_counts(_write(tmp_path, "a.csv", "g1,g2\n3,4\n"), "csv")
        assert em.gene_names == ["g1", "g2"]
        assert em.raw_counts.tolist() == [[3, 4]]

    def test_mtx_single_entry(self, tmp_path):
        text = "%%MatrixMarket matrix coordinate integer general\n% comment\n2 2 1\n1 1 7\n"
        em = ingest.load_counts(_write(tmp_path, "a.mtx", text), "mtx")
        assert em.raw_counts.tolist() == [[7, 0], [0, 0]]

    def test_negative(self, tmp_path):
        with pytest.raises(NegativeCount):
            ingest.load_counts(_write(tmp_path, "a.csv", "1,-1\n"), "csv")

    @pytest.mark.parametrize("text", ["1,2\n3\n", "1,2\n3,x\n", "1.5,2\n"])
    def test_malformed_csv(self, tmp_path, text):
        with pytest.raises(ParseError):
            ingest.load_counts(_write(tmp_path, "a.csv", text), "csv")

    def test_malformed_mtx(self, tmp_path):
        with pytest.raises(ParseError):
            ingest.load_counts(_write(tmp_path, "a.mtx", "2 2 1\n1 1 7\n"), "mtx")
        text = "%%MatrixMarket matrix coordinate integer general\n2 2 2\n1 1 7\n"
        with pytest.raises(ParseError):
            ingest.load_counts(_write(tmp_path, "b.mtx", text), "mtx")

    def test_empty(self, tmp_path):
        with pytest.raises(EmptyMatrix):
            ingest.load_counts(_write(tmp_path, "a.csv", "g1,g2\n"), "csv")
        text = "%%MatrixMarket matrix coordinate integer general\n0 3 0\n"
        with pytest.raises(EmptyMatrix):
            ingest.load_counts(_write(tmp_path, "a.mtx", text), "mtx")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ingest.load_counts(str(tmp_path / "nope.csv"), "csv")

    def test_mtx_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        counts = rng.poisson(0.7, size=(6, 5))
        path = str(tmp_path / "r.mtx")
        ingest.write_mtx(path, counts)
        assert np.array_equal(ingest.load_counts(path, "mtx").raw_counts, counts)


class TestFilterQC:
    def test_noop(self):
        em = ingest.from_counts([[1, 0], [0, 0]])
        out = ingest.filter_qc(em, 0, 0)
        assert np.array_equal(out.raw_counts, em.raw_counts)

    def test_zero_row_removed(self):
        out = ingest.filter_qc(ingest.from_counts([[1, 0], [0, 0]]), 1, 0)
        assert out.raw_counts.tolist() == [[1, 0]]
        assert out.kept_cells.tolist() == [0]

    def test_matches_bruteforce_mask(self):
        rng = np.random.default_rng(11)
        counts = rng.poisson(0.6, size=(5, 5))
        counts[0, :] = 1  # guarantee something survives
        out = ingest.filter_qc(ingest.from_counts(counts), 2, 2)
        rows = [i for i in range(5) if sum(1 for j in range(5) if counts[i, j] > 0) >= 2]
        sub = counts[rows]
        cols = [j for j in range(5) if sum(1 for i in range(len(rows)) if sub[i, j] > 0) >= 2]
        assert np.array_equal(out.raw_counts, sub[:, cols])
        assert out.gene_names == [f"gene_{j}" for j in cols]

    def test_everything_removed(self):
        with pytest.raises(EmptyMatrix):
            ingest.filter_qc(ingest.from_counts([[0, 0]]), 1, 0)


class TestSelectHVG:
    def test_full_selection_preserves_order(self):
        em = ingest.select_hvg(ingest.from_counts([[1, 5, 2], [3, 0, 2]]), 3)
        assert em.selected_genes.tolist() == [0, 1, 2]

    def test_constant_gene_excluded(self):
        em = ingest.select_hvg(ingest.from_counts([[4, 1], [4, 9], [4, 0]]), 1)
        assert em.selected_genes.tolist() == [1]

    def test_top3_matches_oracle(self):
        cols = [
            [0, 0, 0, 0],  # mean 0 ranks last
            [1, 1, 1, 1],  # dispersion 0
            [0, 4, 0, 4],
            [1, 2, 3, 4],
            [0, 0, 0, 8],
            [2, 3, 2, 3],
        ]
        counts = np.array(cols).T
        disp = []
        for j, c in enumerate(cols):
            mean = sum(c) / 4
            var = sum((v - mean) ** 2 for v in c) / 4
            disp.append((-(var / mean) if mean > 0 else float("inf"), j))
        expected = sorted(j for _, j in sorted(disp)[:3])
        em = ingest.select_hvg(ingest.from_counts(counts), 3)
        assert em.selected_genes.tolist() == expected == [2, 3, 4]

    def test_ties_to_lower_index(self):
        em = ingest.select_hvg(ingest.from_counts([[0, 0, 2], [2, 2, 0]]), 2)
        assert em.selected_genes.tolist() == [0, 1]

    def test_insufficient(self):
        with pytest.raises(InsufficientGenes):
            ingest.select_hvg(ingest.from_counts([[1, 2]]), 3)


class TestNormalizeLog:
    def test_single_cell(self):
        em = ingest.normalize_log(ingest.select_hvg(ingest.from_counts([[1, 1]]), 2))
        assert em.size_factors.tolist() == [1.0]
        assert em.processed.tolist() == [[0.0, 0.0]]

    def test_zero_columns_stay_zero(self):
        counts = np.array([[0, 3, 1], [0, 1, 2], [0, 2, 2]])
        em = ingest.normalize_log(ingest.select_hvg(ingest.from_counts(counts), 3))
        assert np.all(em.processed[:, 0] == 0)

    def test_matches_stepwise_oracle(self):
        counts = np.array([[2, 0], [1, 3], [4, 1]])
        totals = [2.0, 4.0, 5.0]
        median = 4.0
        sf = [t / median for t in totals]
        logged = [[np.log1p(counts[i, j] / sf[i]) for j in range(2)] for i in range(3)]
        expected = np.zeros((3, 2))
        for j in range(2):
            col = [logged[i][j] for i in range(3)]
            mu = sum(col) / 3
            sd = (sum((v - mu) ** 2 for v in col) / 3) ** 0.5
            for i in range(3):
                expected[i, j] = (col[i] - mu) / sd
        em = ingest.normalize_log(ingest.select_hvg(ingest.from_counts(counts), 2))
        np.testing.assert_allclose(em.size_factors, sf, rtol=0, atol=1e-15)
        np.testing.assert_allclose(em.processed, expected, rtol=0, atol=1e-12)

    def test_zero_library(self):
        em = ingest.select_hvg(ingest.from_counts([[1, 2], [0, 0]]), 2)
        with pytest.raises(ZeroLibrary):
            ingest.normalize_log(em)


class TestPipelineProperties:
    def _counts(self, seed=0):
        rng = np.random.default_rng(seed)
        return rng.poisson(rng.gamma(1.0, 2.0, size=(1, 30)), size=(40, 30))

    def test_standardised_columns(self):
        em = ingest.preprocess(ingest.from_counts(self._counts()), 20)
        x = em.processed
        assert np.all(np.isfinite(x))
        for j in range(x.shape[1]):
            if np.ptp(x[:, j]) > 0:
                assert abs(x[:, j].mean()) < 1e-9
                assert abs(x[:, j].var() - 1) < 1e-6

    def test_deterministic(self, tmp_path):
        path = str(tmp_path / "c.mtx")
        ingest.write_mtx(path, self._counts(1))
        a = ingest.preprocess(ingest.load_counts(path, "mtx"), 10).processed
        b = ingest.preprocess(ingest.load_counts(path, "mtx"), 10).processed
        assert a.tobytes() == b.tobytes()

    def test_row_permutation_equivariance(self):
        counts = self._counts(2)
        perm = np.random.default_rng(3).permutation(counts.shape[0])
        a = ingest.preprocess(ingest.from_counts(counts), 15)
        b = ingest.preprocess(ingest.from_counts(counts[perm]), 15)
        assert np.array_equal(a.selected_genes, b.selected_genes)
        np.testing.assert_allclose(b.processed, a.processed[perm], atol=1e-12)


class TestBundle:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(4)
        em = ingest.preprocess(ingest.from_counts(rng.poisson(2.0, size=(12, 8))), 5)
        path = tmp_path / "b.bgd"
        ingest.save_bundle(path, em)
        back = ingest.load_bundle(path)
        assert path.read_bytes()[:4] == b"BGD1"
        assert back.processed.tobytes() == em.processed.tobytes()
        assert back.size_factors.tobytes() == em.size_factors.tobytes()
        assert np.array_equal(back.hvg_counts, em.hvg_counts)
        assert back.meta["source_genes"].tolist() == em.selected_genes.tolist()
        assert back.cell_ids == em.cell_ids
        assert back.kept_cells.tolist() == em.kept_cells.tolist()

    def test_labels_encoding(self):
        codes, names = ingest.encode_labels(["b", "a", "b", "c"])
        assert codes.tolist() == [0, 1, 0, 2] and names == ["b", "a", "c"]
