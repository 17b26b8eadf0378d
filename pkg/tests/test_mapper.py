"""Mapper objective and training tests.

The loss oracle below evaluates the objective with explicit loops over
anchors, positives and candidates, normalizing by hand. It shares no
code with the vectorized implementation.
"""

import numpy as np
import pytest

from queen import mapper, nn


# ---------------------------------------------------------------- oracles


def supcon_oracle(z, labels, temperature):
    z = np.asarray(z, dtype=np.float64)
    labels = list(labels)
    n = len(labels)
    zn = []
    for row in z:
        nrm = np.linalg.norm(row)
        zn.append(row / nrm if nrm > 1e-12 else row / 1e-12)
    total = 0.0
    skipped = 0
    for i in range(n):
        others = [j for j in range(n) if j != i]
        pos = [j for j in others if labels[j] == labels[i]]
        if not pos:
            skipped += 1
            continue
        num = sum(np.exp(np.dot(zn[i], zn[o]) / temperature) for o in pos) / len(pos)
        den = sum(np.exp(np.dot(zn[i], zn[a]) / temperature) for a in others)
        total += -np.log(num / den)
    return total, skipped


def random_batch(rng, n, n_classes=3):
    z = rng.normal(size=(n, 2)) * rng.uniform(0.5, 3.0)
    labels = rng.integers(0, n_classes, size=n)
    # ensure at least one anchor has a partner
    labels[1] = labels[0]
    return z, labels


# ------------------------------------------------------------------- loss


def test_loss_matches_oracle_hand_batch():
    z = np.array([[1.0, 0.0], [0.9, 0.1], [-1.0, 0.2], [-0.8, -0.3]])
    labels = [0, 0, 1, 1]
    got, skipped = mapper.supcon_loss(z, labels, 0.1)
    want, _ = supcon_oracle(z, labels, 0.1)
    assert skipped == 0
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_loss_matches_oracle_random_batches():
    rng = np.random.default_rng(4)
    for _ in range(25):
        n = int(rng.integers(2, 40))
        z, labels = random_batch(rng, n)
        for temp in (0.1, 0.2, 1.0):
            got, gs = mapper.supcon_loss(z, labels, temp)
            want, ws = supcon_oracle(z, labels, temp)
            np.testing.assert_allclose(got, want, atol=1e-9, rtol=1e-9)
            assert gs == ws


def test_loss_near_minimum_for_separated_identical_pairs():
    # same-class points identical, classes orthogonal on the unit circle
    z = np.array([[2.0, 0.0], [2.0, 0.0], [0.0, 2.0], [0.0, 2.0]])
    loss, _ = mapper.supcon_loss(z, [0, 0, 1, 1], 0.1)
    assert loss < 0.01
    # antipodal classes push the loss further down
    z2 = np.array([[2.0, 0.0], [2.0, 0.0], [-2.0, 0.0], [-2.0, 0.0]])
    loss2, _ = mapper.supcon_loss(z2, [0, 0, 1, 1], 0.1)
    assert loss2 < loss


def test_loss_decreases_as_positives_approach():
    base = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    labels = [0, 0, 1, 1]
    far, _ = mapper.supcon_loss(base, labels, 0.1)
    closer = np.array([[1.0, 0.0], [0.9, 0.4], [-1.0, 0.0], [-0.9, -0.4]])
    near, _ = mapper.supcon_loss(closer, labels, 0.1)
    assert near < far


def test_singleton_anchors_skipped_and_counted():
    z = np.array([[1.0, 0.0], [0.8, 0.1], [0.0, 1.0]])
    loss, skipped = mapper.supcon_loss(z, [0, 0, 1], 0.1)
    assert skipped == 1
    # the singleton must not contribute: restrict the oracle to anchors 0,1
    want, ws = supcon_oracle(z, [0, 0, 1], 0.1)
    assert ws == 1
    np.testing.assert_allclose(loss, want, atol=1e-12)


def test_all_singletons_rejected():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        mapper.supcon_loss(z, [0, 1], 0.1)


def test_batch_of_one_rejected():
    with pytest.raises(ValueError):
        mapper.supcon_loss(np.array([[1.0, 0.0]]), [0], 0.1)


def test_temperature_change_tracks_oracle():
    rng = np.random.default_rng(9)
    z, labels = random_batch(rng, 12)
    for temp in (0.05, 0.1, 0.2, 0.4):
        got, _ = mapper.supcon_loss(z, labels, temp)
        want, _ = supcon_oracle(z, labels, temp)
        np.testing.assert_allclose(got, want, rtol=1e-9)


# --------------------------------------------------------------- gradient


def test_loss_grad_matches_finite_differences():
    rng = np.random.default_rng(13)
    z, labels = random_batch(rng, 10)
    _, _, g = mapper.supcon_loss_grad(z, labels, 0.1)
    h = 1e-6
    for _ in range(30):
        i = int(rng.integers(10))
        j = int(rng.integers(2))
        zp = z.copy()
        zp[i, j] += h
        zm = z.copy()
        zm[i, j] -= h
        hi, _ = mapper.supcon_loss(zp, labels, 0.1)
        lo, _ = mapper.supcon_loss(zm, labels, 0.1)
        want = (hi - lo) / (2 * h)
        # absolute floor: fd roundoff is ~1e-9 at this loss scale
        assert abs(g[i, j] - want) < 1e-4 * max(abs(want), 1e-4)


# --------------------------------------------------------------- training


def small_feature_problem(seed=0, n_per_class=40, n_classes=3, dim=6):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, dim)) * 4.0
    X = np.vstack([centers[c] + rng.normal(size=(n_per_class, dim)) for c in range(n_classes)])
    y = np.repeat(np.arange(n_classes), n_per_class)
    return X, y


def identity_extractor(dim, n_out=3):
    # single linear layer: features are the raw inputs
    spec = nn.NetworkSpec((dim, n_out), seed=0)
    return nn.Network(spec, nn.init_params(spec))


def test_train_mapper_separates_classes():
    X, y = small_feature_problem()
    extractor = identity_extractor(6)
    spec = mapper.MapperSpec(input_dim=6, hidden=(16, 16, 8), seed=1)
    res = mapper.train_mapper(extractor, X, y, spec, epochs=40, batch_size=32, seed=1)
    assert res.separation_ok
    pts = res.mapper.map_features(extractor.features(X))
    intra, inter = mapper.separation_stats(pts, y)
    assert intra < 0.5 * inter


def test_train_mapper_separation_across_seeds():
    X, y = small_feature_problem(seed=3)
    extractor = identity_extractor(6)
    wins = 0
    for seed in range(10):
        spec = mapper.MapperSpec(input_dim=6, hidden=(16, 16, 8), seed=seed)
        res = mapper.train_mapper(extractor, X, y, spec, epochs=30, batch_size=32, seed=seed)
        pts = res.mapper.map_features(extractor.features(X))
        intra, inter = mapper.separation_stats(pts, y)
        if intra < 0.5 * inter:
            wins += 1
    assert wins >= 9


def test_train_mapper_freezes_extractor_and_is_deterministic():
    X, y = small_feature_problem(seed=5)
    extractor = identity_extractor(6)
    before = extractor.params.copy()
    spec = mapper.MapperSpec(input_dim=6, hidden=(8, 8, 4), seed=2)
    a = mapper.train_mapper(extractor, X, y, spec, epochs=5, seed=7)
    np.testing.assert_array_equal(extractor.params, before)
    b = mapper.train_mapper(extractor, X, y, spec, epochs=5, seed=7)
    np.testing.assert_array_equal(a.mapper.params, b.mapper.params)
    assert a.losses == b.losses


def test_train_mapper_rejects_zero_epochs():
    X, y = small_feature_problem()
    with pytest.raises(ValueError):
        mapper.train_mapper(
            identity_extractor(6), X, y, mapper.MapperSpec(6), epochs=0
        )


def test_map_feature_zero_params_and_batch_consistency():
    spec = mapper.MapperSpec(input_dim=4, hidden=(5, 5, 3), seed=0)
    m = mapper.Mapper(spec, np.zeros(nn.param_count(spec.network_spec())))
    np.testing.assert_array_equal(m.map_feature(np.ones(4)), [0.0, 0.0])

    m2 = mapper.Mapper(spec, nn.init_params(spec.network_spec()))
    rng = np.random.default_rng(0)
    U = rng.normal(size=(7, 4))
    batch = m2.map_features(U)
    for i in range(7):
        np.testing.assert_allclose(batch[i], m2.map_feature(U[i]), atol=1e-12)


def test_mapper_spec_validation():
    with pytest.raises(ValueError):
        mapper.MapperSpec(input_dim=4, hidden=(3, 3), temperature=0.1)
    with pytest.raises(ValueError):
        mapper.MapperSpec(input_dim=4, temperature=0.0)
