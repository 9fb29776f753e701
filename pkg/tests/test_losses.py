import math

import numpy as np
import pytest

from unist.codec import FeatureTaps
from unist.errors import ConfigError, ShapeError
from unist.losses import (
    LossParts,
    LossWeights,
    blur,
    color_diff,
    content_loss,
    gaussian_kernel,
    gram_texture_diff,
    identity_loss,
    metric_dc,
    metric_ds,
    style_loss,
    temporal_loss,
    total_loss,
)
from unist.numcore import Rng, Tensor, backward, grad_check, instance_stats

SHAPES = [(1, 4, 8, 8), (1, 8, 4, 4), (1, 16, 2, 2), (1, 16, 1, 1)]


def taps(rng, shapes=SHAPES, grad=False, low=-1.0, high=1.0):
    return FeatureTaps(*(Tensor(rng.uniform(s, low, high), requires_grad=grad) for s in shapes))


def shifted(t: FeatureTaps, k):
    return FeatureTaps(*(Tensor(x.data + k) for x in t.as_list()))


def tensors(*tapsets):
    return [x for t in tapsets for x in t.as_list()]


# ---------------------------------------------------------------------------
# content
# ---------------------------------------------------------------------------


def test_content_zero_on_identical():
    a = taps(Rng(0))
    assert content_loss(a, a).item() == 0.0


def test_content_constant_offset():
    a = taps(Rng(1))
    expected = sum(math.sqrt(np.prod(s)) for s in SHAPES)
    assert abs(content_loss(shifted(a, 1.0), a).item() - expected) < 1e-12


def test_content_loop_oracle():
    rng = Rng(2)
    a, b = taps(rng), taps(rng)
    total = 0.0
    for x, y in zip(a.as_list(), b.as_list()):
        acc = 0.0
        for u, v in zip(x.data.ravel(), y.data.ravel()):
            acc += (u - v) ** 2
        total += math.sqrt(acc)
    assert abs(content_loss(a, b).item() - total) < 1e-12


def test_content_shape_mismatch():
    rng = Rng(3)
    with pytest.raises(ShapeError):
        content_loss(taps(rng), taps(rng, [(1, 4, 8, 8), (1, 8, 4, 4), (1, 16, 2, 2), (1, 16, 2, 2)]))


# ---------------------------------------------------------------------------
# style
# ---------------------------------------------------------------------------


def test_style_zero_on_identical():
    a = taps(Rng(4))
    assert style_loss(a, a).item() == 0.0


def test_style_constant_shift_closed_form():
    a = taps(Rng(5))
    k = 0.75
    expected = sum(math.sqrt(s[1]) * k for s in SHAPES)
    assert abs(style_loss(shifted(a, k), a).item() - expected) < 1e-12


def test_style_composition_oracle():
    rng = Rng(6)
    shapes_cs = [(2, 4, 8, 8), (2, 8, 4, 4), (2, 16, 2, 2), (2, 16, 1, 1)]
    shapes_s = [(2, 4, 6, 6), (2, 8, 3, 3), (2, 16, 3, 3), (2, 16, 2, 2)]
    a, b = taps(rng, shapes_cs), taps(rng, shapes_s)
    total = 0.0
    for x, y in zip(a.as_list(), b.as_list()):
        mx, sx = (t.data for t in instance_stats(x))
        my, sy = (t.data for t in instance_stats(y))
        for i in range(2):
            total += np.sqrt(((mx[i] - my[i]) ** 2).sum()) + np.sqrt(((sx[i] - sy[i]) ** 2).sum())
    assert abs(style_loss(a, b).item() - total) < 1e-12


def test_style_broadcasts_single_style_item():
    rng = Rng(7)
    shapes2 = [(2,) + s[1:] for s in SHAPES]
    a, s = taps(rng, shapes2), taps(rng)
    tiled = FeatureTaps(*(Tensor(np.concatenate([t.data, t.data])) for t in s.as_list()))
    assert abs(style_loss(a, s).item() - style_loss(a, tiled).item()) < 1e-13


def test_style_channel_mismatch():
    rng = Rng(8)
    with pytest.raises(ShapeError):
        style_loss(taps(rng), taps(rng, [(1, 4, 8, 8), (1, 8, 4, 4), (1, 8, 2, 2), (1, 16, 1, 1)]))


# ---------------------------------------------------------------------------
# identity
# ---------------------------------------------------------------------------


def _identity_case(rng, same=False):
    c, s = Tensor(rng.uniform((1, 3, 8, 8))), Tensor(rng.uniform((1, 3, 8, 8)))
    cc = c if same else Tensor(rng.uniform((1, 3, 8, 8)))
    ss = s if same else Tensor(rng.uniform((1, 3, 8, 8)))
    t = [taps(rng) for _ in range(4)]
    if same:
        t[0], t[2] = t[1], t[3]
    return cc, c, ss, s, t


def test_identity_zero_on_identical():
    cc, c, ss, s, t = _identity_case(Rng(9), same=True)
    assert identity_loss(cc, c, ss, s, *t).item() == 0.0


def test_identity_pixel_only_closed_form():
    cc, c, ss, s, t = _identity_case(Rng(10), same=True)
    n = c.size
    got = identity_loss(Tensor(c.data + 1.0), c, ss, s, *t).item()
    assert abs(got - 0.1 * math.sqrt(n)) < 1e-12


def test_identity_loop_oracle():
    cc, c, ss, s, t = _identity_case(Rng(11))
    w = LossWeights()

    def dist(a, b):
        return math.sqrt(sum((u - v) ** 2 for u, v in zip(a.data.ravel(), b.data.ravel())))

    pix = dist(cc, c) + dist(ss, s)
    feat = sum(dist(x, y) for x, y in zip(t[0].as_list(), t[1].as_list()))
    feat += sum(dist(x, y) for x, y in zip(t[2].as_list(), t[3].as_list()))
    expected = w.lambda_id1 * pix + w.lambda_id2 * feat
    assert abs(identity_loss(cc, c, ss, s, *t, w=w).item() - expected) < 1e-12


def test_identity_shape_mismatch():
    cc, c, ss, s, t = _identity_case(Rng(12))
    with pytest.raises(ShapeError):
        identity_loss(Tensor(np.zeros((1, 3, 8, 4))), c, ss, s, *t)


# ---------------------------------------------------------------------------
# temporal
# ---------------------------------------------------------------------------


def test_temporal_zero_on_identical():
    rng = Rng(13)
    c1, c2 = taps(rng, low=0.0), taps(rng, low=0.0)
    assert temporal_loss(c1, c2, c1, c2).item() == 0.0


def _rescaled(t: FeatureTaps, rng, power_of_two: bool):
    out = []
    for x in t.as_list():
        b, c, h, w = x.shape
        if power_of_two:
            s = 2.0 ** rng.uniform((b, 1, h, w), -3, 3).round()
        else:
            s = rng.uniform((b, 1, h, w), 0.1, 10.0)
        out.append(Tensor(x.data * s))
    return FeatureTaps(*out)


def test_temporal_rescaling_invariance_exact():
    # power-of-two factors scale every intermediate exactly
    rng = Rng(14)
    c1, c2 = taps(rng, low=0.0), taps(rng, low=0.0)
    assert temporal_loss(c1, c2, _rescaled(c1, rng, True), _rescaled(c2, rng, True)).item() == 0.0


def test_temporal_rescaling_invariance_general():
    rng = Rng(15)
    c1, c2 = taps(rng, low=0.0), taps(rng, low=0.0)
    assert abs(temporal_loss(c1, c2, _rescaled(c1, rng, False), _rescaled(c2, rng, False)).item()) < 1e-12


def _cos_dist_oracle(fu, fv):
    _, c, h, w = fu.shape
    pos = [(i, j) for i in range(h) for j in range(w)]
    d = np.zeros((len(pos), len(pos)))
    for m, (i, j) in enumerate(pos):
        for n, (k, l) in enumerate(pos):
            a, b = fu[0, :, i, j], fv[0, :, k, l]
            dot = sum(a[q] * b[q] for q in range(c))
            na = math.sqrt(sum(v * v for v in a))
            nb = math.sqrt(sum(v * v for v in b))
            d[m, n] = 1.0 - dot / max(na * nb, 1e-8)
    for n in range(d.shape[1]):
        d[:, n] = d[:, n] / d[:, n].sum()
    return d


def test_temporal_loop_oracle():
    rng = Rng(16)
    shapes = [(1, 4, 8, 8), (1, 8, 4, 4), (1, 16, 2, 2), (1, 16, 2, 2)]
    c1, c2, s1, s2 = (taps(rng, shapes) for _ in range(4))
    expected = 0.0
    for i in (2, 3):
        dc = _cos_dist_oracle(c1.as_list()[i].data, c2.as_list()[i].data)
        ds = _cos_dist_oracle(s1.as_list()[i].data, s2.as_list()[i].data)
        expected += np.abs(dc - ds).mean()
    assert abs(temporal_loss(c1, c2, s1, s2).item() - expected) < 1e-10


def test_temporal_ignores_shallow_taps():
    rng = Rng(17)
    c1, c2, s1, s2 = (taps(rng) for _ in range(4))
    base = temporal_loss(c1, c2, s1, s2).item()
    s1b = FeatureTaps(Tensor(rng.uniform(SHAPES[0])), Tensor(rng.uniform(SHAPES[1])), s1.phi3, s1.phi4)
    assert temporal_loss(c1, c2, s1b, s2).item() == base


def test_temporal_zero_vector_guard():
    rng = Rng(18)
    c1, c2, s1, s2 = (taps(rng) for _ in range(4))
    c1.phi4.data[:, :, 0, 0] = 0.0
    assert math.isfinite(temporal_loss(c1, c2, s1, s2).item())


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------


def test_total_examples():
    w = LossWeights()
    zero = LossParts(*(Tensor(0.0) for _ in range(4)))
    assert total_loss(zero, w).item() == 0.0
    ones = LossParts(*(Tensor(1.0) for _ in range(4)))
    assert abs(total_loss(ones, w).item() - 92.6) < 1e-12


def test_total_gradient_is_weights():
    w = LossWeights()
    parts = LossParts(*(Tensor(v, requires_grad=True) for v in (0.3, 2.0, 1.1, 0.01)))
    backward(total_loss(parts, w))
    got = [p.grad.item() for p in (parts.content, parts.style, parts.identity, parts.temporal)]
    assert got == [w.lambda_c, w.lambda_s, 1.0, w.lambda_t]


def test_loss_weights_validated():
    with pytest.raises(ConfigError):
        LossWeights(lambda_c=-1.0)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


COMPOSITE_EPS = 1e-4  # sums of many norms: the default step is swamped by roundoff


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_gradchecks(seed):
    rng = Rng(100 + seed)
    a, b = taps(rng, grad=True), taps(rng, grad=True)
    assert grad_check(lambda: content_loss(a, b), tensors(a, b)) < 1e-4
    assert grad_check(lambda: style_loss(a, b), tensors(a, b)) < 1e-4
    pos = [(1, 4, 8, 8), (1, 8, 4, 4), (1, 16, 3, 3), (1, 16, 2, 2)]
    c1, c2, s1, s2 = (taps(rng, pos, grad=True, low=0.0) for _ in range(4))
    assert grad_check(lambda: temporal_loss(c1, c2, s1, s2), [c1.phi3, c1.phi4, s1.phi3, s2.phi4]) < 1e-4
    cc, c, ss, s, t = _identity_case(rng)
    for x in [cc, ss] + tensors(t[0], t[2]):
        x.requires_grad = True
    assert grad_check(lambda: identity_loss(cc, c, ss, s, *t), [cc, ss] + tensors(t[0], t[2]), eps=COMPOSITE_EPS) < 1e-4
    parts = [Tensor(v, requires_grad=True) for v in rng.uniform(4)]
    assert grad_check(lambda: total_loss(LossParts(*parts)), parts) < 1e-4


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def test_metrics_zero_on_identical():
    a = taps(Rng(19))
    assert metric_dc(a, a) == 0.0 and metric_ds(a, a) == 0.0


def test_metric_batch_mean():
    rng = Rng(20)
    shapes2 = [(2,) + s[1:] for s in SHAPES]
    a, b = taps(rng, shapes2), taps(rng, shapes2)

    def item(t, i):
        return FeatureTaps(*(x[i : i + 1] for x in t.as_list()))

    per_c = [content_loss(item(a, i), item(b, i)).item() for i in range(2)]
    per_s = [style_loss(item(a, i), item(b, i)).item() for i in range(2)]
    assert abs(metric_dc(a, b) - sum(per_c) / 2) < 1e-12
    assert abs(metric_ds(a, b) - sum(per_s) / 2) < 1e-12


def test_gram_constant_closed_form():
    shapes = [(1, 1, 4, 4)] * 4
    one = FeatureTaps(*(Tensor(np.ones(s)) for s in shapes))
    two = FeatureTaps(*(Tensor(2 * np.ones(s)) for s in shapes))
    assert abs(gram_texture_diff(one, two) - 4 * 3.0) < 1e-12
    assert gram_texture_diff(one, one) == 0.0


def test_gram_loop_oracle():
    rng = Rng(21)
    a, b = taps(rng), taps(rng)
    total = 0.0
    for x, y in zip(a.as_list(), b.as_list()):
        _, c, h, w = x.shape
        acc = 0.0
        for i in range(c):
            for j in range(c):
                gx = sum(x.data[0, i].ravel()[p] * x.data[0, j].ravel()[p] for p in range(h * w)) / (c * h * w)
                gy = sum(y.data[0, i].ravel()[p] * y.data[0, j].ravel()[p] for p in range(h * w)) / (c * h * w)
                acc += (gx - gy) ** 2
        total += math.sqrt(acc)
    assert abs(gram_texture_diff(a, b) - total) < 1e-12


def test_blur_kernel_and_constants():
    k = gaussian_kernel()
    assert k.shape == (21,) and abs(k.sum() - 1.0) < 1e-15
    assert k[10] == k.max() and np.array_equal(k, k[::-1])
    img = np.full((1, 3, 12, 9), 0.37)
    assert np.abs(blur(img) - 0.37).max() < 1e-15


def test_blur_matches_direct_2d_sum():
    rng = Rng(22)
    img = rng.uniform((1, 1, 7, 5))
    k = gaussian_kernel()
    r = 10
    padded = np.pad(img[0, 0], r, mode="edge")
    direct = np.zeros((7, 5))
    for i in range(7):
        for j in range(5):
            direct[i, j] = (padded[i : i + 21, j : j + 21] * np.outer(k, k)).sum()
    assert np.abs(blur(img)[0, 0] - direct).max() < 1e-14


def test_color_diff_examples():
    rng = Rng(23)
    img = rng.uniform((2, 3, 8, 10))
    assert color_diff(img, img) == 0.0
    assert abs(color_diff(img + 1.0, img) - math.sqrt(3 * 8 * 10)) < 1e-12
    with pytest.raises(ShapeError):
        color_diff(img, img[:, :, :4])
