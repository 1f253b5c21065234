import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uplift_lab.baselearn import (
    BACKENDS, BaseLearnerConfig, TreeEnsembleModel, fit_classifier, fit_regressor, predict, predict_proba,
)
from uplift_lab.baselearn.losses import focal_grad, focal_loss_grad, softmax, softmax_ce_grad
from uplift_lab.errors import (
    ConfigBoundViolation, DegenerateProbability, EmptyData, MissingClass, SchemaMismatch, SingleClassData,
)

backends = pytest.mark.parametrize("backend", sorted(BACKENDS))


def test_compiled_backend_built():
    # the pure fallback is a fallback; a source install should have the extension
    assert "compiled" in BACKENDS


# -- losses -------------------------------------------------------------------


def focal_of_logits(z, y, gamma):
    pt = softmax(z[None, :])[0, y]
    return -((1 - pt) ** gamma) * np.log(pt)


def fd_grad_hess(z, y, gamma, step=1e-5):
    g, h = np.zeros_like(z), np.zeros_like(z)
    f0 = focal_of_logits(z, y, gamma)
    for k in range(z.size):
        e = np.zeros_like(z)
        e[k] = step
        fp, fm = focal_of_logits(z + e, y, gamma), focal_of_logits(z - e, y, gamma)
        g[k] = (fp - fm) / (2 * step)
        h[k] = (fp - 2 * f0 + fm) / step**2
    return g, h


def test_focal_hand_values():
    loss, _, _ = focal_loss_grad([0.25, 0.75], 1, 0.0)
    assert loss == pytest.approx(-np.log(0.75), abs=1e-12)
    loss, _, _ = focal_loss_grad([0.25, 0.75], 1, 2.0)
    assert loss == pytest.approx(0.25**2 * -np.log(0.75), abs=1e-12)
    assert loss == pytest.approx(0.01798, abs=1e-5)
    loss, _, _ = focal_loss_grad([1e-12, 1 - 1e-12], 1, 2.0)
    assert loss == pytest.approx(0.0, abs=1e-20)


def test_focal_gamma0_is_cross_entropy():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(50, 4))
    y = rng.integers(0, 4, 50)
    g0, h0 = focal_grad(y, z, 0.0)
    g1, h1 = softmax_ce_grad(y, z)
    assert np.allclose(g0, g1, atol=1e-12) and np.allclose(h0, h1, atol=1e-12)


def test_focal_rejects_bad_probabilities():
    with pytest.raises(DegenerateProbability):
        focal_loss_grad([0.5, 0.6], 0, 2.0)
    with pytest.raises(DegenerateProbability):
        focal_loss_grad([1.5, -0.5], 0, 2.0)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 1.0, 2.0, 3.5])
def test_gradients_match_finite_differences(gamma):
    # 100 random (p, y) per gamma, derivatives on the logit scale
    rng = np.random.default_rng(int(gamma * 10))
    for _ in range(100):
        K = int(rng.integers(2, 6))
        z = rng.normal(scale=1.5, size=K)
        y = int(rng.integers(K))
        g, h = focal_grad(np.array([y]), z[None, :], gamma)
        g_fd, _ = fd_grad_hess(z, y, gamma)
        assert np.allclose(g[0], g_fd, rtol=1e-4, atol=1e-8)
        # hessian from finite differences of the analytic gradient
        h_fd = np.array([
            (focal_grad(np.array([y]), (z + d)[None, :], gamma)[0][0, k]
             - focal_grad(np.array([y]), (z - d)[None, :], gamma)[0][0, k]) / 2e-5
            for k in range(K) for d in [np.eye(K)[k] * 1e-5]
        ])
        assert np.allclose(h[0], h_fd, rtol=1e-4, atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=2, max_size=6), st.data(), st.floats(0, 4))
def test_focal_loss_nonnegative_and_grad_sums_to_zero(z, data, gamma):
    z = np.array(z)
    y = data.draw(st.integers(0, z.size - 1))
    p = softmax(z[None, :])[0]
    loss, g, _ = focal_loss_grad(p / p.sum(), y, gamma)
    assert loss >= 0
    assert abs(g.sum()) < 1e-9  # softmax shift invariance


# -- regression ----------------------------------------------------------------


@backends
def test_constant_target(backend):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 3))
    m = fit_regressor(X, np.full(200, 4.5), BaseLearnerConfig(n_estimators=10), backend=backend)
    assert np.allclose(predict(m, rng.normal(size=(50, 3))), 4.5)


@backends
def test_linear_target_fit(backend):
    rng = np.random.default_rng(2)
    X = rng.uniform(-1, 1, size=(1000, 2))
    y = 3 * X[:, 0]
    Xt = rng.uniform(-1, 1, size=(500, 2))
    cfg = BaseLearnerConfig(n_estimators=100, max_depth=6, learning_rate=0.3, reg_lambda=0.0)
    m = fit_regressor(X, y, cfg, backend=backend)
    rmse = np.sqrt(np.mean((predict(m, Xt) - 3 * Xt[:, 0]) ** 2))
    assert rmse < 0.1 * np.std(y)
    assert all(b <= a + 1e-12 for a, b in zip(m.train_loss, m.train_loss[1:]))


@backends
def test_stump_underfits_xor(backend):
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]] * 25, dtype=float)
    y = np.logical_xor(X[:, 0], X[:, 1]).astype(float)
    m = fit_regressor(X, y, BaseLearnerConfig(n_estimators=1, max_depth=1, learning_rate=1.0), backend=backend)
    assert m.train_loss[-1] > 0


def test_stump_leaf_values_by_hand():
    # one split on x0 at 0.5; Newton leaf = -G/(H+lambda) * lr on residuals from the mean
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    y = np.array([1.0, 3.0, 10.0, 14.0])
    lam, lr = 1.0, 0.5
    m = fit_regressor(X, y, BaseLearnerConfig(n_estimators=1, max_depth=1, reg_lambda=lam, learning_rate=lr))
    base = y.mean()
    left = -np.sum(base - y[:2]) / (2 + lam) * lr
    right = -np.sum(base - y[2:]) / (2 + lam) * lr
    assert np.allclose(predict(m, X), base + np.array([left, left, right, right]), atol=1e-12)


def test_l1_soft_threshold_zeroes_small_leaves():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    y = np.array([1.0, 3.0, 10.0, 14.0])  # |G| per child = 10
    m = fit_regressor(X, y, BaseLearnerConfig(n_estimators=1, max_depth=1, reg_alpha=50.0))
    assert np.allclose(predict(m, X), y.mean())


@backends
def test_interpolation(backend):
    rng = np.random.default_rng(3)
    X = rng.normal(size=(16, 2))
    y = rng.normal(size=16)
    cfg = BaseLearnerConfig(n_estimators=200, max_depth=5, reg_lambda=0.0, min_child_weight=0.0, learning_rate=1.0)
    m = fit_regressor(X, y, cfg, backend=backend)
    assert np.allclose(predict(m, X), y, atol=1e-6)


def test_monotone_regularization():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(300, 3))
    y = X[:, 0] + rng.normal(size=300)
    sums = []
    for lam in (0.0, 0.5, 1.0, 5.0, 50.0):
        m = fit_regressor(X, y, BaseLearnerConfig(n_estimators=1, max_depth=3, reg_lambda=lam))
        t = m.trees[0][0]
        leaves = t.value[t.feature < 0]
        sums.append(float(np.sum(leaves**2)))
    assert all(b <= a + 1e-15 for a, b in zip(sums, sums[1:]))


@backends
def test_determinism_and_colsample_seed(backend):
    rng = np.random.default_rng(5)
    X = rng.normal(size=(300, 6))
    y = X @ rng.normal(size=6)
    cfg = BaseLearnerConfig(n_estimators=15, colsample_bytree=0.5)
    a = fit_regressor(X, y, cfg, seed=3, backend=backend).to_dict()
    assert a == fit_regressor(X, y, cfg, seed=3, backend=backend).to_dict()
    full = BaseLearnerConfig(n_estimators=15, colsample_bytree=1.0)
    assert fit_regressor(X, y, full, seed=1, backend=backend).to_dict() == \
        fit_regressor(X, y, full, seed=99, backend=backend).to_dict()


def test_backends_identical():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend unavailable")
    rng = np.random.default_rng(6)
    X = np.round(rng.normal(size=(400, 5)), 1)  # ties in feature values
    y = X[:, 0] * X[:, 1] + rng.normal(size=400)
    labels = (X[:, 0] > 0).astype(int) + (X[:, 2] > 0.5).astype(int)
    for fit, target, cfg in [
        (fit_regressor, y, BaseLearnerConfig(n_estimators=20, max_depth=5, colsample_bytree=0.6, gamma=0.1)),
        (fit_classifier, labels, BaseLearnerConfig(n_estimators=10, loss="focal", reg_alpha=0.5)),
        (fit_classifier, labels, BaseLearnerConfig(n_estimators=10, loss="softmax_ce", min_child_weight=3)),
    ]:
        a = fit(X, target, cfg, seed=2, backend="compiled")
        b = fit(X, target, cfg, seed=2, backend="python")
        assert a.to_dict() == b.to_dict()


def test_gamma_blocks_weak_splits():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(200, 2))
    y = rng.normal(scale=0.01, size=200)
    m = fit_regressor(X, y, BaseLearnerConfig(n_estimators=3, gamma=1e6))
    assert all(len(g[0].feature) == 1 for g in m.trees)


# -- classification -------------------------------------------------------------


@backends
@pytest.mark.parametrize("loss", ["softmax_ce", "focal"])
def test_separable_blobs(backend, loss):
    rng = np.random.default_rng(8)
    X = np.vstack([rng.normal(0, 1, size=(100, 2)), rng.normal(10, 1, size=(100, 2))])
    labels = np.repeat([0, 1], 100)
    m = fit_classifier(X, labels, BaseLearnerConfig(n_estimators=10, loss=loss), backend=backend)
    assert (predict(m, X) == labels).mean() == 1.0
    P = predict_proba(m, X)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-9)


def test_uninformative_labels_give_flat_probabilities():
    means = []
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        X = rng.normal(size=(400, 3))
        labels = np.arange(400) % 4
        rng.shuffle(labels)
        m = fit_classifier(X, labels, BaseLearnerConfig(n_estimators=10, max_depth=2, loss="softmax_ce"), seed=seed)
        means.append(predict_proba(m, rng.normal(size=(200, 3))).mean(axis=0))
    avg = np.mean(means, axis=0)
    assert ((avg >= 0.15) & (avg <= 0.35)).all()


def test_classifier_errors():
    X = np.zeros((4, 1))
    with pytest.raises(MissingClass):
        fit_classifier(X, [0, 0, 2, 2], BaseLearnerConfig(loss="softmax_ce"))
    with pytest.raises(SingleClassData):
        fit_classifier(X, [0, 0, 0, 0], BaseLearnerConfig(loss="softmax_ce"))
    with pytest.raises(ConfigBoundViolation):
        fit_classifier(X, [0, 1, 0, 1], BaseLearnerConfig())
    with pytest.raises(ConfigBoundViolation):
        fit_regressor(X, [0, 1, 0, 1], BaseLearnerConfig(loss="focal"))
    with pytest.raises(EmptyData):
        fit_regressor(np.zeros((1, 1)), [1.0], BaseLearnerConfig())


@pytest.mark.parametrize("field,value", [
    ("gamma", -1), ("n_estimators", 0), ("colsample_bytree", 0.0), ("colsample_bytree", 1.5), ("max_depth", 0),
    ("min_child_weight", -1), ("reg_lambda", -0.1), ("reg_alpha", -1), ("learning_rate", 0), ("loss", "hinge"),
    ("focal_gamma", -1),
])
def test_config_bounds(field, value):
    with pytest.raises(ConfigBoundViolation):
        BaseLearnerConfig(**{field: value})


def test_predict_contract(tmp_path):
    rng = np.random.default_rng(9)
    X = rng.normal(size=(300, 4))
    labels = rng.integers(0, 3, 300)
    m = fit_classifier(X, labels, BaseLearnerConfig(n_estimators=5, loss="focal"), schema=("a", "b", "c", "d"))
    assert predict(m, np.zeros((0, 4))).shape == (0,)
    assert predict_proba(m, np.zeros((0, 4))).shape == (0, 3)
    P = predict_proba(m, rng.normal(size=(1000, 4)))
    assert np.abs(P.sum(axis=1) - 1).max() <= 1e-9
    with pytest.raises(SchemaMismatch):
        predict(m, np.zeros((3, 5)))
    m.save(tmp_path / "m.json")
    back = TreeEnsembleModel.load(tmp_path / "m.json")
    assert np.array_equal(predict_proba(back, X), predict_proba(m, X))
    assert back.to_dict() == m.to_dict()
    assert len(m.trees) == 5 and all(len(g) == 3 for g in m.trees)
