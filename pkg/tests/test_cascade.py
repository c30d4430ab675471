import numpy as np
import pytest

from cascadet.anchors import PyramidConfig, generate
from cascadet.cascade import (
    CascadeConfig,
    ModelOutputs,
    assemble_batch,
    build_selection_sets,
    imbalance_before_after,
    stc_filter,
    str_refine,
)
from cascadet.matcher import match

PYR = generate(PyramidConfig(128))


def zero_outputs(n, p_logit=0.0):
    return ModelOutputs(np.full(n, p_logit), np.zeros(n), np.zeros((n, 4)), np.zeros((n, 4)))


def test_selection_sets_partition_levels():
    omega, psi = build_selection_sets(PYR, CascadeConfig())
    assert not (omega & psi).any()
    assert (omega | psi).all()
    assert set(PYR.level[omega]) == {0, 1, 2}


def test_selection_sets_unknown_level():
    with pytest.raises(KeyError):
        build_selection_sets(PYR, CascadeConfig(stc_levels=("P9",)))


def test_stc_filter_rule():
    omega = np.array([True, True, True, False])
    p = np.array([0.005, 0.01, 0.5, 0.0])
    # 1 - p > 0.99 drops; exactly 0.99 stays
    assert stc_filter(p, omega, 0.99).tolist() == [False, True, True, True]


def test_str_refine_only_selected_rows():
    x = np.tile([0.5, 0.0, 0.0, 0.0], (len(PYR), 1))
    _, psi = build_selection_sets(PYR, CascadeConfig())
    out = str_refine(x, PYR.boxes, psi)
    np.testing.assert_array_equal(out[~psi], PYR.boxes[~psi])
    w = PYR.boxes[psi, 2] - PYR.boxes[psi, 0]
    np.testing.assert_allclose(out[psi, 0] - PYR.boxes[psi, 0], 0.5 * w)


def test_str_refine_rejects_nonfinite():
    _, psi = build_selection_sets(PYR, CascadeConfig())
    x = np.zeros((len(PYR), 4))
    x[np.flatnonzero(psi)[0]] = np.inf
    with pytest.raises(ValueError):
        str_refine(x, PYR.boxes, psi)


def test_disabled_steps():
    cfg = CascadeConfig(stc_levels=(), str_levels=())
    omega, psi = build_selection_sets(PYR, cfg)
    assert not omega.any() and not psi.any()
    batch = assemble_batch(PYR, np.array([[10, 10, 50, 60.0]]), zero_outputs(len(PYR), -20.0), cfg)
    assert batch.phi.all()
    np.testing.assert_array_equal(batch.refined, PYR.boxes)


def test_second_step_matches_refined_anchors():
    gts = np.array([[20, 20, 100, 110.0]])
    out = zero_outputs(len(PYR))
    _, psi = build_selection_sets(PYR, CascadeConfig())
    x = np.zeros((len(PYR), 4))
    x[psi, 0] = 0.3
    out = ModelOutputs(out.p_logit, out.q_logit, x, out.t)
    b = assemble_batch(PYR, gts, out, CascadeConfig())
    np.testing.assert_array_equal(b.match2.labels, match(b.refined, gts, CascadeConfig().step2).labels)
    np.testing.assert_array_equal(b.match1.labels, match(PYR.boxes, gts, CascadeConfig().step1).labels)


def test_cached_matches_agree():
    gts = np.array([[20, 20, 100, 110.0], [5, 5, 20, 24.0]])
    rng = np.random.default_rng(0)
    n = len(PYR)
    out = ModelOutputs(rng.normal(size=n), rng.normal(size=n), rng.normal(0, 0.2, (n, 4)), np.zeros((n, 4)))
    cfg = CascadeConfig()
    fresh = assemble_batch(PYR, gts, out, cfg)
    cached = assemble_batch(
        PYR,
        gts,
        out,
        cfg,
        match1=match(PYR.boxes, gts, cfg.step1),
        base_match2=match(PYR.boxes, gts, cfg.step2),
    )
    for a, b in ((fresh.match1, cached.match1), (fresh.match2, cached.match2)):
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.gt_index, b.gt_index)
        np.testing.assert_array_equal(np.nan_to_num(a.targets), np.nan_to_num(b.targets))


def test_output_length_checked():
    with pytest.raises(ValueError):
        assemble_batch(PYR, np.zeros((0, 4)), zero_outputs(5), CascadeConfig())


def test_filtering_lowers_imbalance():
    gts = np.array([[20, 20, 52, 60.0]])
    p = np.full(len(PYR), -10.0)
    m2 = match(PYR.boxes, gts, CascadeConfig().step2)
    p[m2.labels == 1] = 5.0
    zeros = np.zeros((len(PYR), 4))
    b = assemble_batch(PYR, gts, ModelOutputs(p, p, zeros, zeros), CascadeConfig())
    before, after = imbalance_before_after(b)
    assert after < before


def test_config_roundtrip_and_validation():
    cfg = CascadeConfig(negative_threshold=0.95)
    assert CascadeConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        CascadeConfig(negative_threshold=0.0)
    with pytest.raises(ValueError):
        CascadeConfig.from_dict({"bogus": 1})
