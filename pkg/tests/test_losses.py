import dataclasses

import numpy as np
import pytest

from cascadet.losses import FocalParams, LossCounts, focal_loss, sigmoid, smooth_l1, stc_loss, str_loss, total_loss

from helpers import central_difference, random_batch


def test_focal_matches_definition():
    z = np.array([-3.0, -0.5, 0.0, 0.7, 4.0])
    p = 1 / (1 + np.exp(-z))
    for y in (0, 1):
        loss, _ = focal_loss(z, np.full(5, y))
        if y:
            want = -0.25 * (1 - p) ** 2 * np.log(p)
        else:
            want = -0.75 * p**2 * np.log(1 - p)
        np.testing.assert_allclose(loss, want, rtol=1e-12)


def test_focal_reduces_to_cross_entropy():
    z = np.linspace(-5, 5, 11)
    y = (np.arange(11) % 2).astype(int)
    loss, _ = focal_loss(z, y, FocalParams(alpha=0.5, gamma=0.0))
    p = 1 / (1 + np.exp(-z))
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    np.testing.assert_allclose(loss, 0.5 * bce, rtol=1e-12)


def test_focal_stable_at_extreme_logits():
    loss, grad = focal_loss(np.array([-800.0, 800.0]), np.array([1, 0]))
    assert np.all(np.isfinite(loss)) and np.all(np.isfinite(grad))
    assert loss[0] == pytest.approx(0.25 * 800)


def test_focal_rejects_nonfinite():
    with pytest.raises(ValueError):
        focal_loss(np.array([np.nan]), np.array([1]))


@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0, 3.0])
def test_focal_gradient(gamma):
    fp = FocalParams(0.3, gamma)
    z = np.random.default_rng(1).normal(0, 3, 12)
    for y in (0, 1):
        labels = np.full(12, y)
        _, g = focal_loss(z, labels, fp)
        # elementwise loss, so an elementwise difference is exact per entry
        h = 1e-6
        num = (focal_loss(z + h, labels, fp)[0] - focal_loss(z - h, labels, fp)[0]) / (2 * h)
        np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-12)


def test_smooth_l1_values_and_gradient():
    x = np.array([-2.0, -0.5, 0.0, 0.3, 1.5])
    v, d = smooth_l1(x)
    np.testing.assert_allclose(v, [1.5, 0.125, 0.0, 0.045, 1.0])
    np.testing.assert_allclose(d, [-1, -0.5, 0, 0.3, 1])


def test_focal_params_validation():
    with pytest.raises(ValueError):
        FocalParams(alpha=1.5)
    with pytest.raises(ValueError):
        FocalParams(gamma=-1)


def test_sigmoid_stable():
    np.testing.assert_allclose(sigmoid([-1000, 0, 1000]), [0, 0.5, 1])


def test_ignored_anchors_contribute_nothing():
    rng = np.random.default_rng(3)
    b = random_batch(rng)
    base = stc_loss(b)
    ign = (b.match1.labels == -1) & b.omega
    assert ign.any()
    moved = dataclasses.replace(b, p_logit=np.where(ign, b.p_logit + 5.0, b.p_logit))
    assert stc_loss(moved) == pytest.approx(base, rel=1e-14)


def test_filtered_anchors_excluded_from_second_step():
    rng = np.random.default_rng(4)
    b = random_batch(rng)
    dropped = ~b.phi
    assert dropped.any()
    moved = dataclasses.replace(b, q_logit=np.where(dropped, b.q_logit - 7.0, b.q_logit))
    assert stc_loss(moved) == pytest.approx(stc_loss(b), rel=1e-14)


def test_normalization_clamps_to_one():
    rng = np.random.default_rng(5)
    b = random_batch(rng, p_pos=0.0)
    counts = LossCounts.of(b)
    assert counts == LossCounts(0, 0, 0, 0)
    l1 = b.match1.labels
    sel = b.omega & (l1 >= 0)
    sel2 = b.phi & (b.match2.labels >= 0)
    want = focal_loss(b.p_logit[sel], l1[sel])[0].sum() + focal_loss(b.q_logit[sel2], b.match2.labels[sel2])[0].sum()
    assert stc_loss(b) == pytest.approx(want)


def test_str_loss_unnormalized_by_default():
    rng = np.random.default_rng(6)
    b = random_batch(rng)
    n = LossCounts.of(b)
    plain = str_loss(b)
    normed = str_loss(b, normalize=True)
    assert n.reg1 > 1 or n.reg2 > 1
    assert plain != pytest.approx(normed)


def test_str_loss_requires_targets():
    rng = np.random.default_rng(7)
    b = random_batch(rng)
    bad = b.match1.targets.copy()
    bad[np.flatnonzero(b.psi & (b.match1.labels == 1))[0]] = np.nan
    with pytest.raises(ValueError):
        str_loss(dataclasses.replace(b, match1=dataclasses.replace(b.match1, targets=bad)))


def test_counts_add():
    assert LossCounts(1, 2, 3, 4) + LossCounts(1, 1, 1, 1) == LossCounts(2, 3, 4, 5)


@pytest.mark.parametrize("normalize", [False, True])
def test_total_loss_gradient(normalize):
    rng = np.random.default_rng(8)
    b = random_batch(rng)
    rep, g = total_loss(b, normalize_str=normalize)
    assert rep.total == pytest.approx(rep.stc_loss + rep.str_loss)
    for name, grad in (("p_logit", g.p_logit), ("q_logit", g.q_logit), ("x", g.x), ("t", g.t)):

        def f(v, name=name):
            return total_loss(dataclasses.replace(b, **{name: v}), normalize_str=normalize)[0].total

        num = central_difference(f, getattr(b, name), 1e-6)
        np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-8)
