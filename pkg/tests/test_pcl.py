import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from apc.pcl import (
    DegenerateEmbeddingError,
    cosine_similarity,
    normalized_similarity,
    partition_confidence,
    pce_batch,
    pce_loss,
)
from oracles import central_diff, pce_pairwise, rel_err

vec = st.lists(st.floats(-10, 10), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3)


class TestSimilarity:
    def test_cases(self):
        assert cosine_similarity([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
        assert cosine_similarity([1, 0], [0, 1]) == 0.0
        assert cosine_similarity([1, 0], [-1, 0]) == -1.0
        assert normalized_similarity([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
        assert normalized_similarity([1, 0], [0, 1]) == 0.5
        assert normalized_similarity([1, 0], [-1, 0]) == 0.0

    def test_zero_vector(self):
        with pytest.raises(DegenerateEmbeddingError):
            cosine_similarity([0, 0], [1, 0])

    @given(vec, vec, st.floats(0.01, 100), st.floats(0.01, 100))
    def test_symmetric_scale_invariant(self, u, v, a, b):
        s = cosine_similarity(u, v)
        assert s == pytest.approx(cosine_similarity(v, u), abs=1e-12)
        assert s == pytest.approx(cosine_similarity(np.multiply(a, u), np.multiply(b, v)), abs=1e-9)
        assert 0 <= normalized_similarity(u, v) <= 1


class TestPartition:
    def test_thresholds(self):
        p = partition_confidence(np.array([[0.9], [0.1], [0.5]]), 0.85)
        assert p.high == [[0]] and p.low == [[1]]

    def test_all_half(self):
        p = partition_confidence(np.full((4, 2), 0.5), 0.85)
        assert p.high == [[], []] and p.low == [[], []]

    def test_default_eps(self):
        import inspect

        assert inspect.signature(partition_confidence).parameters["eps"].default == 0.85

    @pytest.mark.parametrize("eps", [0.5, 0.3, 1.0, 1.2])
    def test_bad_eps(self, eps):
        with pytest.raises(ValueError):
            partition_confidence(np.full((2, 2), 0.5), eps)

    def test_pair_counts(self):
        p = partition_confidence(np.array([[0.9], [0.95], [0.99], [0.1]]), 0.85)
        assert p.n_pos_pairs(0) == 6 and p.n_neg_pairs(0) == 3

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0.51, 0.99))
    def test_disjoint(self, col, eps):
        p = partition_confidence(np.array(col)[:, None], eps)
        assert not set(p.high[0]) & set(p.low[0])


def _loss(emb, high, low):
    f = torch.tensor(emb, dtype=torch.float64)
    n = len(emb)
    Z = np.full((n, 1), 0.5)
    Z[high, 0] = 0.9
    Z[low, 0] = 0.1
    return pce_loss(f, partition_confidence(Z, 0.85), 0).item()


class TestPCE:
    def test_identical_highs(self):
        assert _loss([[1.0, 2.0], [1.0, 2.0]], [0, 1], []) == pytest.approx(0.0, abs=1e-12)

    def test_one_high_one_low(self):
        assert _loss([[1.0, 0.0], [0.0, 1.0]], [0], [1]) == pytest.approx(0.5, abs=1e-12)

    def test_worked_075(self):
        emb = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]
        assert _loss(emb, [0, 1], [2]) == pytest.approx(0.75, abs=1e-12)
        assert pce_pairwise(emb[:2], emb[2:]) == pytest.approx(0.75, abs=1e-12)

    def test_empty_is_zero(self):
        assert _loss([[1.0, 0.0], [0.0, 1.0]], [], [1]) == 0.0

    def test_range_and_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 12))
            emb = rng.normal(size=(n, 4))
            labels = rng.choice(["h", "l", "n"], n)
            high, low = list(np.flatnonzero(labels == "h")), list(np.flatnonzero(labels == "l"))
            got = _loss(emb.tolist(), high, low)
            assert 0 <= got <= 2
            assert got == pytest.approx(pce_pairwise(emb[high].tolist(), emb[low].tolist()), abs=1e-12)

    def test_zero_iff_parallel_antiparallel(self):
        emb = [[1.0, 1.0], [2.0, 2.0], [-1.0, -1.0], [-3.0, -3.0]]
        assert _loss(emb, [0, 1], [2, 3]) == pytest.approx(0.0, abs=1e-12)
        emb[1] = [2.0, 1.9]
        assert _loss(emb, [0, 1], [2, 3]) > 1e-6

    def test_scale_invariance(self, rng):
        emb = rng.normal(size=(6, 3))
        base = _loss(emb.tolist(), [0, 1, 2], [4, 5])
        emb[1] *= 7.5
        assert _loss(emb.tolist(), [0, 1, 2], [4, 5]) == pytest.approx(base, abs=1e-12)

    def test_zero_embedding_raises(self):
        with pytest.raises(DegenerateEmbeddingError):
            _loss([[0.0, 0.0], [1.0, 0.0]], [0, 1], [])

    def test_gradient_fd(self, rng):
        emb = rng.normal(size=(7, 5))
        Z = np.array([[0.9], [0.95], [0.88], [0.1], [0.05], [0.5], [0.99]])
        part = partition_confidence(Z, 0.85)
        f = torch.tensor(emb, requires_grad=True)
        pce_loss(f, part, 0).backward()
        numeric = central_diff(lambda e: pce_loss(torch.from_numpy(e), part, 0).item(), emb)
        assert rel_err(f.grad.numpy(), numeric) <= 1e-4

    def test_batched_matches_per_class(self, rng):
        B, s, C = 3, 10, 4
        f = torch.from_numpy(rng.normal(size=(B, s, 6)))
        Z = torch.softmax(torch.from_numpy(rng.normal(0, 4, (B, s, C))), -1)
        present = torch.from_numpy(rng.integers(0, 2, (B, C))).double()
        got = pce_batch(f, Z, present, 0.85)
        for b in range(B):
            part = partition_confidence(Z[b], 0.85)
            expect = sum(pce_loss(f[b], part, c) for c in range(C) if present[b, c])
            assert got[b].item() == pytest.approx(float(expect), abs=1e-12)
