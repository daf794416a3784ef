import pytest
import torch

from apc.encoder import EncoderConfig, HVBiLSTM, PatchEncoder
from apc.patchify import patchify_batch


def make(depth=1, e=8, heads=2, d=4, grid=2, pos=True):
    torch.manual_seed(0)
    return PatchEncoder(EncoderConfig(depth=depth, heads=heads, e=e, d=d, grid=grid, pos_embed=pos)).eval()


def test_shape_contract():
    enc = make()
    patches = torch.rand(1, 4, 4 * 4 * 3)
    f_in, taps = enc(patches, 2, 2)
    assert f_in.shape == (1, 4, 8)
    assert len(taps) == 1


def test_config_invariants():
    with pytest.raises(ValueError):
        EncoderConfig(depth=0)
    with pytest.raises(ValueError):
        EncoderConfig(e=10, heads=4)


def test_param_shape_mismatch():
    enc = make()
    with pytest.raises(ValueError):
        enc(torch.rand(1, 4, 7), 2, 2)


def test_permutation_equivariance_without_positions():
    enc = make(pos=False, depth=2)
    patches = torch.rand(1, 4, 48, dtype=torch.float64)
    patches[0, 2] = patches[0, 0]  # duplicate patch
    enc = enc.double()
    perm = torch.tensor([3, 0, 2, 1])
    out, _ = enc(patches, 2, 2)
    out_p, _ = enc(patches[:, perm], 2, 2)
    torch.testing.assert_close(out_p, out[:, perm], rtol=1e-12, atol=1e-12)
    torch.testing.assert_close(out[0, 0], out[0, 2], rtol=1e-12, atol=1e-12)


def test_eval_determinism():
    enc = make(depth=2)
    enc.cfg.dropout = 0.5
    x = torch.rand(2, 4, 48)
    a, _ = enc(x, 2, 2)
    b, _ = enc(x, 2, 2)
    assert torch.equal(a, b)


def test_positions_interpolate_for_other_grids():
    enc = make(grid=2)
    out, _ = enc(torch.rand(1, 9, 48), 3, 3)
    assert out.shape == (1, 9, 8)


def test_hv_full_size_shape():
    hv = HVBiLSTM(192)
    out = hv(torch.rand(1, 576, 192), 24, 24)
    assert out.shape == (1, 576, 192)


@pytest.mark.parametrize("gh,gw", [(1, 1), (1, 5), (4, 1), (3, 2)])
def test_hv_shape_preserved(gh, gw):
    assert HVBiLSTM(6)(torch.rand(2, gh * gw, 6), gh, gw).shape == (2, gh * gw, 6)


def test_hv_grid_mismatch():
    with pytest.raises(ValueError):
        HVBiLSTM(6)(torch.rand(1, 5, 6), 2, 2)


def test_hv_zero_weights_identity():
    hv = HVBiLSTM(8).double()
    with torch.no_grad():
        for lstm in (hv.row, hv.col):
            for p in lstm.parameters():
                p.zero_()
        hv.proj.weight.copy_(torch.eye(8))
        hv.proj.bias.zero_()
    f = torch.randn(2, 6, 8, dtype=torch.float64)
    assert torch.equal(hv(f, 2, 3), f)


def _lstm_step(lstm, x, reverse=False):
    sfx = "_reverse" if reverse else ""
    w_ih, w_hh = getattr(lstm, "weight_ih_l0" + sfx), getattr(lstm, "weight_hh_l0" + sfx)
    b = getattr(lstm, "bias_ih_l0" + sfx) + getattr(lstm, "bias_hh_l0" + sfx)
    gates = x @ w_ih.T + b  # zero initial hidden state
    i, f, g, o = gates.chunk(4, dim=-1)
    c = torch.sigmoid(i) * torch.tanh(g)
    return torch.sigmoid(o) * torch.tanh(c)


def test_hv_single_cell_degenerate_case():
    torch.manual_seed(3)
    hv = HVBiLSTM(6).double()
    f = torch.randn(1, 1, 6, dtype=torch.float64)
    with torch.no_grad():
        h = torch.cat([_lstm_step(hv.row, f[0, 0]), _lstm_step(hv.row, f[0, 0], True)])
        v = torch.cat([_lstm_step(hv.col, h), _lstm_step(hv.col, h, True)])
        expect = f[0, 0] + hv.proj(h + v)
        torch.testing.assert_close(hv(f, 1, 1)[0, 0], expect)


def test_encode_refine_gradient_fd():
    from oracles import central_diff, rel_err

    torch.manual_seed(0)
    cfg = EncoderConfig(depth=1, heads=2, e=8, d=2, grid=2)
    enc, hv = PatchEncoder(cfg).double(), HVBiLSTM(8).double()
    img = torch.rand(1, 4, 4, 3, dtype=torch.float64)
    probe = torch.randn(4, 8, dtype=torch.float64)

    def f(x):
        x = torch.as_tensor(x).reshape(1, 4, 4, 3)
        f_in, _ = enc(patchify_batch(x, 2), 2, 2)
        return (hv(f_in, 2, 2)[0] * probe).sum()

    x = img.clone().requires_grad_(True)
    f(x).backward()
    with torch.no_grad():
        numeric = central_diff(lambda a: float(f(torch.from_numpy(a))), img.numpy())
    assert rel_err(x.grad.numpy(), numeric) <= 1e-4


@pytest.mark.parametrize("radius", [0, 1])
def test_windowed_attention_is_local(radius):
    torch.manual_seed(0)
    enc = PatchEncoder(EncoderConfig(depth=2, heads=2, e=8, d=2, grid=4, attn_window=radius)).eval()
    patches = torch.rand(1, 16, 12)
    base, _ = enc(patches, 4, 4)
    far = patches.clone()
    far[0, 15] = torch.rand(12)  # bottom-right corner
    moved, _ = enc(far, 4, 4)
    reach = radius * 2  # two blocks
    # patch (0, 0) is more than ``reach`` cells from (3, 3)
    assert 3 > reach
    assert torch.equal(base[0, 0], moved[0, 0])
    assert not torch.equal(base[0, 15], moved[0, 15])


def test_window_mask_radius():
    from apc.encoder import window_mask

    m = window_mask(3, 3, 1)
    assert not m[4].any()  # centre sees everything
    assert m[0].tolist() == [False, False, True, False, False, True, True, True, True]
    assert torch.equal(window_mask(2, 2, 0), ~torch.eye(4, dtype=torch.bool))
