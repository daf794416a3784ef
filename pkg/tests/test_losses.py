import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from apc.losses import IGNORE, LossWeights, mce_loss, seg_loss, total_loss
from oracles import central_diff, rel_err


class TestMCE:
    def test_perfect(self):
        t = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
        assert mce_loss(t.clone(), t).item() <= 1e-6

    @pytest.mark.parametrize("t", [[1, 0, 0], [1, 1, 1], [0, 0, 0, 1]])
    def test_half(self, t):
        t = torch.tensor(t, dtype=torch.float64)
        assert mce_loss(torch.full_like(t, 0.5), t).item() == pytest.approx(math.log(2), abs=1e-12)
        assert math.log(2) == pytest.approx(0.6931, abs=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mce_loss(torch.zeros(3), torch.zeros(4))

    def test_gradient_fd(self, rng):
        y = rng.uniform(0.05, 0.95, 5)
        t = torch.tensor([1, 0, 1, 1, 0], dtype=torch.float64)
        yt = torch.tensor(y, requires_grad=True)
        mce_loss(yt, t).backward()
        numeric = central_diff(lambda a: mce_loss(torch.from_numpy(a), t).item(), y)
        assert rel_err(yt.grad.numpy(), numeric) <= 1e-4

    def test_convex_midpoint(self, rng):
        for _ in range(200):
            t = torch.from_numpy(rng.integers(0, 2, 4)).double()
            a, b = (torch.from_numpy(rng.uniform(0.01, 0.99, 4)) for _ in range(2))
            mid = mce_loss((a + b) / 2, t)
            assert mid <= (mce_loss(a, t) + mce_loss(b, t)) / 2 + 1e-12


class TestSeg:
    def test_one_hot_match(self, rng):
        mask = torch.from_numpy(rng.integers(0, 4, (6, 5)))
        logits = F.one_hot(mask, 4).double() * 50
        loss, _ = seg_loss(logits, mask)
        assert loss.item() <= 1e-6

    def test_uniform(self, rng):
        mask = torch.from_numpy(rng.integers(0, 4, (6, 5)))
        loss, _ = seg_loss(torch.zeros(6, 5, 4, dtype=torch.float64), mask)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_half_ignored(self, rng):
        logits = torch.from_numpy(rng.normal(size=(4, 4, 3)))
        mask = torch.from_numpy(rng.integers(0, 3, (4, 4)))
        ignored = mask.clone()
        ignored[:2] = IGNORE
        got, _ = seg_loss(logits, ignored)
        expect, _ = seg_loss(logits[2:], mask[2:])
        assert got.item() == pytest.approx(expect.item(), abs=1e-12)
        ref = F.cross_entropy(logits.reshape(-1, 3), ignored.reshape(-1), ignore_index=IGNORE)
        assert got.item() == pytest.approx(ref.item(), abs=1e-12)

    def test_all_ignored(self):
        loss, flag = seg_loss(torch.zeros(2, 2, 3), torch.full((2, 2), IGNORE))
        assert loss.item() == 0.0 and flag

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            seg_loss(torch.zeros(2, 2, 3), torch.zeros(3, 2, dtype=torch.long))

    def test_gradient_fd(self, rng):
        logits = rng.normal(size=(3, 3, 4))
        mask = torch.from_numpy(rng.integers(0, 4, (3, 3)))
        x = torch.tensor(logits, requires_grad=True)
        seg_loss(x, mask)[0].backward()
        numeric = central_diff(lambda a: seg_loss(torch.from_numpy(a), mask)[0].item(), logits)
        assert rel_err(x.grad.numpy(), numeric) <= 1e-4


class TestTotal:
    def test_zero_weights(self):
        assert total_loss(1.3, 2.0, 5.0, LossWeights(0, 0)) == 1.3

    def test_defaults(self):
        assert total_loss(1.0, 2.0, 3.0, LossWeights()) == pytest.approx(1.07, abs=1e-12)

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 1), st.floats(0, 1))
    def test_linear(self, m, s, p, l1, l2):
        base = total_loss(m, s, p, LossWeights(l1, l2))
        assert total_loss(m, s, p, LossWeights(2 * l1, l2)) == pytest.approx(base + l1 * s, abs=1e-9)
        assert total_loss(m + 1, s, p, LossWeights(l1, l2)) == pytest.approx(base + 1, abs=1e-9)

    def test_negative_weights(self):
        with pytest.raises(ValueError):
            LossWeights(-1, 0)
