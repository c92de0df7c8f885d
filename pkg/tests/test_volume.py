import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
import torch

from dvanet.volume import (
    Hourglass,
    apply_disparity_attention,
    apply_hierarchy_attention,
    build_discrepancy_volume,
    disparity_attention,
    group_reduce,
    regress_disparity,
    soft_argmin,
    upsample_logits,
)


def test_discrepancy_hand_values():
    left = torch.tensor([1.0, 2.0, 3.0]).view(1, 1, 1, 3)
    right = torch.tensor([4.0, 5.0, 6.0]).view(1, 1, 1, 3)
    vol = build_discrepancy_volume(left, right, 3)
    assert vol[0, 0, 1, 0, 2] == -2.0
    assert vol[0, 0, 2, 0, 1] == 0.0
    assert vol.shape == (1, 1, 3, 1, 3)


def test_discrepancy_self_subtraction_zero_at_d0():
    f = torch.randn(1, 4, 3, 5)
    assert torch.all(build_discrepancy_volume(f, f, 3)[:, :, 0] == 0)


@pytest.mark.parametrize("shape", [(1, 1, 2, 1, 2), (2, 8, 4, 6, 6), (1, 3, 5, 2, 7)])
def test_discrepancy_bruteforce(shape):
    b, c, d, h, w = shape
    g = torch.Generator().manual_seed(sum(shape))
    left = torch.randn(b, c, h, w, generator=g, dtype=torch.float64)
    right = torch.randn(b, c, h, w, generator=g, dtype=torch.float64)
    ref = torch.zeros(b, c, d, h, w, dtype=torch.float64)
    for bi, ci, di, y, x in itertools.product(range(b), range(c), range(d), range(h), range(w)):
        if x >= di:
            ref[bi, ci, di, y, x] = left[bi, ci, y, x] - right[bi, ci, y, x - di]
    assert torch.equal(build_discrepancy_volume(left, right, d), ref)


def test_discrepancy_rejects_bad_range():
    f = torch.zeros(1, 1, 2, 3)
    with pytest.raises(ValueError):
        build_discrepancy_volume(f, f, 4)
    with pytest.raises(ValueError):
        build_discrepancy_volume(f, f, 0)


def test_group_reduce():
    v = torch.full((1, 128, 2, 3, 3), 7.0)
    assert torch.all(group_reduce(v) == 7.0) and group_reduce(v).shape == (1, 32, 2, 3, 3)
    v = torch.arange(1.0, 5.0).view(1, 4, 1, 1, 1)
    assert group_reduce(v, 1).item() == 2.5
    with pytest.raises(ValueError):
        group_reduce(torch.zeros(1, 30, 1, 1, 1))


def test_hierarchy_attention_examples():
    vol = torch.randn(1, 32, 3, 2, 2)
    out, a_c = apply_hierarchy_attention(vol, torch.zeros(1, 32, 2, 2), return_weights=True)
    assert torch.all(a_c == 0.5)
    torch.testing.assert_close(out, 0.5 * vol)
    one = apply_hierarchy_attention(torch.full((1, 1, 1, 1, 1), 4.0),
                                    torch.full((1, 1, 1, 1), torch.log(torch.tensor(3.0)).item()))
    assert one.item() == pytest.approx(3.0, rel=1e-6)
    sat = apply_hierarchy_attention(vol, torch.full((1, 32, 2, 2), 50.0))
    torch.testing.assert_close(sat, vol, rtol=1e-6, atol=0)


def test_hierarchy_attention_shape_mismatch():
    with pytest.raises(ValueError):
        apply_hierarchy_attention(torch.zeros(1, 32, 2, 4, 4), torch.zeros(1, 32, 2, 2))


def test_disparity_attention_uniform_and_normalized():
    a = disparity_attention(torch.zeros(1, 1, 5, 2, 3))
    torch.testing.assert_close(a, torch.full_like(a, 0.2))
    a = disparity_attention(torch.randn(2, 1, 7, 3, 4) * 5)
    torch.testing.assert_close(a.sum(2), torch.ones(2, 1, 3, 4))


def test_disparity_filtering():
    vol = torch.randn(1, 4, 5, 2, 2)
    out = apply_disparity_attention(vol, torch.full((1, 1, 5, 2, 2), 0.2))
    torch.testing.assert_close(out, vol / 5)
    onehot = torch.zeros(1, 1, 5, 2, 2)
    onehot[:, :, 3] = 1.0
    out = apply_disparity_attention(vol, onehot)
    assert torch.all(out[:, :, [0, 1, 2, 4]] == 0)
    assert torch.equal(out[:, :, 3], vol[:, :, 3])
    a_d = torch.rand(1, 1, 5, 2, 2) + 0.1
    ratio = apply_disparity_attention(vol, a_d) / vol
    torch.testing.assert_close(ratio, ratio[:, :1].expand_as(ratio))


def test_soft_argmin_examples():
    logits = torch.full((1, 16, 2, 2), -50.0)
    logits[:, 9] = 50.0
    torch.testing.assert_close(soft_argmin(logits), torch.full((1, 2, 2), 9.0), atol=1e-3, rtol=0)
    assert torch.all(soft_argmin(torch.zeros(1, 16, 1, 1)) == 7.5)


def _direct_quarter_regression(logits_q, d_max):
    # independent oracle: linear interpolation along disparity written out per index
    d_q = logits_q.shape[0]
    full = []
    for i in range(d_max):
        pos = min(i / 4.0, d_q - 1)
        lo = int(pos)
        hi = min(lo + 1, d_q - 1)
        t = pos - lo
        full.append((1 - t) * logits_q[lo] + t * logits_q[hi])
    full = torch.stack(full)
    p = torch.softmax(full, 0)
    return float((p * torch.arange(d_max, dtype=full.dtype)).sum())


@pytest.mark.parametrize("j", [0, 1, 3, 5])
def test_quarter_onehot_maps_to_4j(j):
    d_max = 32
    logits = torch.zeros(1, 1, d_max // 4, 2, 2, dtype=torch.float64)
    logits[:, :, j] = 50.0
    out = regress_disparity(logits, d_max)
    assert out.shape == (1, 8, 8)
    assert abs(out[0, 0, 0].item() - 4 * j) <= 0.5
    assert out[0, 3, 3].item() == pytest.approx(_direct_quarter_regression(logits[0, 0, :, 0, 0], d_max), abs=1e-9)


def test_regress_disparity_bounds():
    out = regress_disparity(torch.randn(2, 1, 4, 3, 5) * 30, 16)
    assert out.shape == (2, 12, 20)
    assert out.min() >= 0 and out.max() <= 15


def test_upsample_logits_validation():
    with pytest.raises(ValueError):
        upsample_logits(torch.zeros(1, 1, 4, 2, 2), 18)
    with pytest.raises(ValueError):
        upsample_logits(torch.zeros(1, 1, 4, 2, 2), 32)


def test_hourglass_shape_determinism_and_gradient():
    torch.manual_seed(0)
    hg = Hourglass(32, (16, 16)).double().eval()
    x = torch.randn(1, 32, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    y = hg(x)
    assert y.shape == x.shape
    assert torch.equal(y, hg(x))
    y.pow(2).sum().backward()
    assert (x.grad != 0).float().mean() == 1.0


def test_hourglass_rejects_indivisible():
    with pytest.raises(ValueError):
        Hourglass(32, (16, 16))(torch.zeros(1, 32, 3, 8, 8))


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 10), st.integers(0, 2**16))
def test_hierarchy_attention_linear_in_volume(k, seed):
    g = torch.Generator().manual_seed(seed)
    vol = torch.randn(1, 32, 2, 3, 3, generator=g, dtype=torch.float64)
    f_att = torch.randn(1, 32, 3, 3, generator=g, dtype=torch.float64)
    torch.testing.assert_close(apply_hierarchy_attention(k * vol, f_att), k * apply_hierarchy_attention(vol, f_att))
