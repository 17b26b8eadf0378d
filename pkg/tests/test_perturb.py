"""Tests for answer falsification.

Oracles first: an independent bisection route to the simplex projection,
dense grid searches over the simplex for the cosine optimizer, a replay
of the ensemble draw with an identically seeded generator, and a head
whose decision boundary sits at a known coordinate so the perturbation
walk can be checked against arithmetic.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from queen import nn, perturb
from queen.data import DatasetSpec, generate_dataset

# ---------------------------------------------------------------- oracles


def bisect_simplex_projection(v, iters=200):
    """Projection via bisection on the shift: sum(max(v - tau, 0)) = 1.

    Monotone decreasing in tau, so plain bisection nails tau to full
    float precision. Entirely independent of the sort-based route.
    """
    v = np.asarray(v, dtype=np.float64)
    lo = float(v.min()) - 1.0
    hi = float(v.max())
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.maximum(v - mid, 0.0).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    return np.maximum(v - 0.5 * (lo + hi), 0.0)


def grid_best_cosine_2(target, step=1e-4):
    p = np.arange(0.0, 1.0 + step / 2, step)
    Y = np.stack([p, 1.0 - p], axis=1)
    cos = Y @ target / (np.linalg.norm(Y, axis=1) * np.linalg.norm(target))
    return float(np.max(cos))


def grid_best_cosine_3(target, step=1e-3):
    g = np.arange(0.0, 1.0 + step / 2, step)
    A, B = np.meshgrid(g, g)
    keep = A + B <= 1.0 + 1e-12
    a, b = A[keep], B[keep]
    Y = np.stack([a, b, 1.0 - a - b], axis=1)
    cos = Y @ target / (np.linalg.norm(Y, axis=1) * np.linalg.norm(target))
    return float(np.max(cos))


def boundary_network():
    """Single-layer head with its decision boundary at feature x = 5.

    logits(u) = (-u1 + 10, u1): class 0 for u1 < 5, tie at exactly 5
    (argmax then stays at class 0), class 1 beyond. Features are the
    inputs themselves, so the perturbation walk is plain 2D geometry.
    """
    spec = nn.NetworkSpec((2, 2))
    params = nn.pack(spec, [(np.array([[-1.0, 1.0], [0.0, 0.0]]), np.array([10.0, 0.0]))])
    net = nn.Network(spec, params)
    centers = {0: np.array([0.0, 0.0]), 1: np.array([10.0, 0.0])}
    return net, centers


def tiny_splits():
    return generate_dataset(
        DatasetSpec(
            n_classes=3,
            dim=4,
            train_per_class=30,
            test_per_class=5,
            aux_per_class=40,
            center_scale=4.0,
            seed=7,
        )
    )


# ------------------------------------------------------ simplex projection


def test_simplex_project_matches_bisection_oracle():
    cases = [
        np.array([1.2, -0.2]),
        np.array([5.0, 5.0]),
        np.array([-1.0, -2.0, 3.0]),
        np.array([0.25, 0.25, 0.25, 0.25]),
        np.array([0.0, 0.0]),
    ]
    rng = np.random.default_rng(11)
    for size in range(2, 9):
        for _ in range(8):
            cases.append(rng.uniform(-10, 10, size))
    for v in cases:
        got = perturb.simplex_project(v)
        want = bisect_simplex_projection(v)
        np.testing.assert_allclose(got, want, atol=1e-9)
        assert perturb.is_simplex_valid(got)


def test_simplex_project_known_values():
    np.testing.assert_allclose(perturb.simplex_project([1.2, -0.2]), [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(perturb.simplex_project([5.0, 5.0]), [0.5, 0.5], atol=1e-15)


@settings(deadline=None)
@given(
    st.lists(
        st.floats(min_value=-10.0, max_value=10.0, allow_nan=False),
        min_size=2,
        max_size=8,
    )
)
def test_simplex_project_property(vals):
    v = np.array(vals)
    p = perturb.simplex_project(v)
    assert perturb.is_simplex_valid(p)
    np.testing.assert_allclose(p, bisect_simplex_projection(v), atol=1e-9)
    # projecting an already-projected point changes nothing
    np.testing.assert_allclose(perturb.simplex_project(p), p, atol=1e-12)


def test_simplex_project_is_nearest_point():
    rng = np.random.default_rng(23)
    for _ in range(20):
        v = rng.uniform(-3, 3, 5)
        p = perturb.simplex_project(v)
        best = np.linalg.norm(p - v)
        for _ in range(200):
            w = rng.dirichlet(np.ones(5))
            assert best <= np.linalg.norm(w - v) + 1e-12


def test_simplex_project_rejects_bad_shape():
    with pytest.raises(ValueError):
        perturb.simplex_project(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        perturb.simplex_project(np.zeros(0))


# -------------------------------------------------------- cosine optimizer


def test_valid_target_passes_through():
    for t in ([0.3, 0.7], [1.0, 0.0, 0.0], [0.25, 0.25, 0.5]):
        got = perturb.optimize_valid_softmax(np.array(t))
        np.testing.assert_array_equal(got, np.array(t))


def test_optimizer_matches_grid_2():
    for t in ([1.2, -0.2], [-0.2, 1.2], [2.0, -1.0], [0.7, 0.6]):
        t = np.array(t)
        got = perturb.optimize_valid_softmax(t)
        assert perturb.is_simplex_valid(got)
        cos = float(np.dot(got, t) / (np.linalg.norm(got) * np.linalg.norm(t)))
        assert cos >= grid_best_cosine_2(t) - 1e-6


def test_optimizer_matches_grid_3():
    for t in ([0.5, 0.7, -0.2], [1.5, -0.3, -0.2], [-0.1, 0.6, 0.5], [0.2, 0.2, 0.2]):
        t = np.array(t)
        got = perturb.optimize_valid_softmax(t)
        assert perturb.is_simplex_valid(got)
        cos = float(np.dot(got, t) / (np.linalg.norm(got) * np.linalg.norm(t)))
        assert cos >= grid_best_cosine_3(t) - 1e-6


def test_optimizer_output_always_valid():
    rng = np.random.default_rng(31)
    for _ in range(60):
        size = int(rng.integers(2, 7))
        t = rng.uniform(-2, 2, size)
        got = perturb.optimize_valid_softmax(t)
        assert perturb.is_simplex_valid(got)
        assert np.all(np.isfinite(got))


def test_nonpositive_target_answers_uniform():
    np.testing.assert_allclose(
        perturb.optimize_valid_softmax(np.array([-1.0, -0.3, -0.2])),
        np.full(3, 1 / 3),
    )
    np.testing.assert_allclose(
        perturb.optimize_valid_softmax(np.zeros(4)), np.full(4, 0.25)
    )


def test_optimizer_rejects_bad_targets():
    with pytest.raises(ValueError):
        perturb.optimize_valid_softmax(np.array([1.0]))
    with pytest.raises(ValueError):
        perturb.optimize_valid_softmax(np.array([np.nan, 0.5]))


# --------------------------------------------------------- reversal target


def test_reverse_target_examples():
    np.testing.assert_allclose(
        perturb.reverse_target([0.9, 0.1], [0.6, 0.4]), [0.3, 0.7], atol=1e-12
    )
    # estimate equal to the honest answer reverses to the honest answer
    np.testing.assert_allclose(
        perturb.reverse_target([0.6, 0.4], [0.6, 0.4]), [0.6, 0.4], atol=1e-15
    )
    np.testing.assert_allclose(
        perturb.reverse_target([1.0, 0.0], [0.5, 0.5]), [0.0, 1.0], atol=1e-15
    )


def test_reverse_target_shape_mismatch():
    with pytest.raises(ValueError):
        perturb.reverse_target([0.5, 0.5], [1.0, 0.0, 0.0])


def test_reversal_pipeline_hand_case():
    raw = perturb.reverse_target([0.9, 0.1], [0.6, 0.4])
    got = perturb.optimize_valid_softmax(raw)
    np.testing.assert_allclose(got, [0.3, 0.7], atol=1e-12)


# ----------------------------------------------------------- shadow models


def test_stratified_splits_partition():
    splits = tiny_splits()
    rng = np.random.default_rng(3)
    parts = perturb.stratified_disjoint_splits(splits.train.y, 3, 5, rng)
    assert len(parts) == 5
    all_idx = np.concatenate(parts)
    assert len(all_idx) == len(set(all_idx.tolist()))
    np.testing.assert_array_equal(np.sort(all_idx), np.arange(len(splits.train)))
    # 30 per class dealt into 5 piles: exactly 6 of each class per pile
    for p in parts:
        counts = np.bincount(splits.train.y[p], minlength=3)
        np.testing.assert_array_equal(counts, [6, 6, 6])


def test_stratified_splits_class_too_small():
    y = np.array([0, 0, 1, 1, 1])
    with pytest.raises(ValueError):
        perturb.stratified_disjoint_splits(y, 2, 3, np.random.default_rng(0))


def test_train_shadows_deterministic():
    splits = tiny_splits()
    template = nn.NetworkSpec((4, 8, 3))
    a = perturb.train_shadows(splits.train, 4, template, epochs=2, lr=0.05, seed=5)
    b = perturb.train_shadows(splits.train, 4, template, epochs=2, lr=0.05, seed=5)
    assert len(a) == 4
    for ma, mb in zip(a.members, b.members):
        np.testing.assert_array_equal(ma.params, mb.params)
    # different data and init per member
    assert not np.array_equal(a.members[0].params, a.members[1].params)
    c = perturb.train_shadows(splits.train, 4, template, epochs=2, lr=0.05, seed=6)
    assert not np.array_equal(a.members[0].params, c.members[0].params)


def test_estimate_matches_replay():
    splits = tiny_splits()
    template = nn.NetworkSpec((4, 8, 3))
    ens = perturb.train_shadows(splits.train, 10, template, epochs=2, lr=0.05, seed=5)
    x = splits.test.X[0]

    got = perturb.estimate_piracy_softmax(ens, x, 3, np.random.default_rng(123))

    replay_rng = np.random.default_rng(123)
    picks = replay_rng.choice(10, size=3, replace=False)
    want = np.zeros(3)
    for i in picks:
        want += ens.members[i].confidences(x[None, :])[0]
    want /= 3
    np.testing.assert_array_equal(got, want)
    assert perturb.is_simplex_valid(got, atol=1e-9)


def test_estimate_full_draw_is_plain_mean():
    splits = tiny_splits()
    template = nn.NetworkSpec((4, 8, 3))
    ens = perturb.train_shadows(splits.train, 4, template, epochs=2, lr=0.05, seed=5)
    x = splits.test.X[1]
    got = perturb.estimate_piracy_softmax(ens, x, 4, np.random.default_rng(0))
    want = np.mean([m.confidences(x[None, :])[0] for m in ens.members], axis=0)
    np.testing.assert_allclose(got, want, atol=1e-15)


def test_estimate_draw_size_validation():
    splits = tiny_splits()
    template = nn.NetworkSpec((4, 8, 3))
    ens = perturb.train_shadows(splits.train, 4, template, epochs=1, lr=0.05, seed=5)
    for bad in (0, 5):
        with pytest.raises(ValueError):
            perturb.estimate_piracy_softmax(ens, splits.test.X[0], bad, np.random.default_rng(0))


# ----------------------------------------------------- feature perturbation


def test_feature_perturb_stops_at_boundary():
    net, centers = boundary_network()
    cfg = perturb.PerturbationConfig(fp_step=0.5)
    res = perturb.feature_perturb(np.array([1.0, 0.0]), net, centers, cfg)
    # 8 half-steps from x=1.0 land exactly on the tie at x=5.0, where
    # argmax still answers class 0; the 9th step would flip and is refused
    assert res.steps == 8
    assert not res.hit_iter_limit
    np.testing.assert_allclose(res.probs, [0.5, 0.5], atol=1e-15)
    assert int(np.argmax(res.probs)) == 0


def test_feature_perturb_default_step():
    net, centers = boundary_network()
    res = perturb.feature_perturb(
        np.array([1.0, 0.0]), net, centers, perturb.PerturbationConfig()
    )
    # step = 1% of the initial distance 9.0; floor(4 / 0.09) accepted steps
    assert res.steps == 44
    assert int(np.argmax(res.probs)) == 0
    assert res.probs[0] - res.probs[1] < 0.05


def test_feature_perturb_iteration_cap():
    net, centers = boundary_network()
    cfg = perturb.PerturbationConfig(fp_step=0.5, fp_max_iters=3)
    res = perturb.feature_perturb(np.array([1.0, 0.0]), net, centers, cfg)
    assert res.hit_iter_limit
    assert res.steps == 3


def test_feature_perturb_degenerate_center():
    net, _ = boundary_network()
    x = np.array([1.0, 0.0])
    res = perturb.feature_perturb(x, net, {0: x.copy()}, perturb.PerturbationConfig())
    assert res.steps == 0
    np.testing.assert_allclose(res.probs, net.confidences(x[None, :])[0])


def test_feature_perturb_preserves_argmax_random():
    rng = np.random.default_rng(47)
    spec = nn.NetworkSpec((4, 6, 3), seed=2)
    for trial in range(30):
        net = nn.Network(
            spec, nn.init_params(nn.NetworkSpec((4, 6, 3), seed=trial))
        )
        x = rng.normal(size=4)
        centers = {c: rng.normal(size=6) for c in range(3)}
        res = perturb.feature_perturb(x, net, centers, perturb.PerturbationConfig())
        assert int(np.argmax(res.probs)) == int(net.predict(x[None, :])[0])


def test_reversed_answer_valid_and_deterministic():
    splits = tiny_splits()
    template = nn.NetworkSpec((4, 8, 3), seed=1)
    res = nn.sgd_train(
        template, nn.Batch(splits.train.X, splits.train.one_hot()), epochs=5, lr=0.1, seed=2
    )
    net = nn.Network(template, res.params)
    ens = perturb.train_shadows(splits.train, 4, template, epochs=2, lr=0.05, seed=5)
    cfg = perturb.PerturbationConfig(draw_size=3)
    x = splits.aux.X[0]
    a = perturb.reversed_answer(x, net, ens, cfg, np.random.default_rng(9))
    b = perturb.reversed_answer(x, net, ens, cfg, np.random.default_rng(9))
    assert perturb.is_simplex_valid(a)
    np.testing.assert_array_equal(a, b)


# --------------------------------------------------------- answer dispatch


def trained_models():
    splits = tiny_splits()
    template = nn.NetworkSpec((4, 8, 3), seed=1)
    res = nn.sgd_train(
        template, nn.Batch(splits.train.X, splits.train.one_hot()), epochs=8, lr=0.1, seed=2
    )
    net = nn.Network(template, res.params)
    centers = {
        c: net.features(splits.train.X[splits.train.class_indices(c)]).mean(axis=0)
        for c in range(3)
    }
    return splits, net, centers


def test_perturb_output_honest_conditions():
    from queen.sensitivity import Condition

    splits, net, centers = trained_models()
    cfg = perturb.PerturbationConfig()
    x = splits.aux.X[0]
    want = net.confidences(x[None, :])[0]
    for cond in (Condition.C, Condition.D):
        got = perturb.perturb_output(x, cond, net, None, centers, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(got, want)


def test_perturb_output_reversal_with_clone_is_identity():
    # an ensemble that is an exact clone of the protectee estimates the
    # honest answer itself, and reversing around it changes nothing
    from queen.sensitivity import Condition

    splits, net, centers = trained_models()
    clone = perturb.ShadowEnsemble(members=[net], splits=[np.arange(len(splits.train))])
    cfg = perturb.PerturbationConfig(draw_size=1)
    x = splits.aux.X[3]
    got = perturb.perturb_output(x, Condition.B, net, clone, centers, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(got, net.confidences(x[None, :])[0], atol=1e-12)


def test_perturb_output_requires_ensemble_for_reversal():
    from queen.sensitivity import Condition

    splits, net, centers = trained_models()
    with pytest.raises(ValueError):
        perturb.perturb_output(
            splits.aux.X[0], Condition.B, net, None, centers,
            perturb.PerturbationConfig(), np.random.default_rng(0),
        )


def test_perturb_output_feature_path_shaves_margin():
    from queen.sensitivity import Condition

    splits, net, centers = trained_models()
    cfg = perturb.PerturbationConfig()
    rng = np.random.default_rng(0)
    lowered = 0
    n = 100
    for x in splits.aux.X[:n]:
        honest = net.confidences(x[None, :])[0]
        got = perturb.perturb_output(x, Condition.A, net, None, centers, cfg, rng)
        assert perturb.is_simplex_valid(got)
        assert int(np.argmax(got)) == int(np.argmax(honest))
        if np.max(got) < np.max(honest):
            lowered += 1
    assert lowered >= 0.95 * n


# --------------------------------------------------------------- baselines


def test_baseline_label_only():
    np.testing.assert_array_equal(
        perturb.baseline_label_only([0.2, 0.5, 0.3]), [0.0, 1.0, 0.0]
    )
    # ties go to the lowest index, same as the serving argmax
    np.testing.assert_array_equal(
        perturb.baseline_label_only([0.4, 0.4, 0.2]), [1.0, 0.0, 0.0]
    )


def test_baseline_rounding():
    got = perturb.baseline_rounding([0.333, 0.333, 0.334])
    assert abs(got.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(got, [0.4, 0.3, 0.3], atol=1e-12)
    got = perturb.baseline_rounding([0.97, 0.02, 0.01])
    assert abs(got.sum() - 1.0) < 1e-12
    assert int(np.argmax(got)) == 0


def test_config_validation():
    with pytest.raises(ValueError):
        perturb.PerturbationConfig(fp_step=0.0)
    with pytest.raises(ValueError):
        perturb.PerturbationConfig(opt_iters=0)
    with pytest.raises(ValueError):
        perturb.PerturbationConfig(draw_size=0)
    with pytest.raises(ValueError):
        perturb.PerturbationConfig(opt_tol=-1.0)
