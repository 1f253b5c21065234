import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_dataset
from uplift_lab.baselearn import BaseLearnerConfig
from uplift_lab.core import ALL_ARMS, Arm, split
from uplift_lab.errors import EmptyPolicy, InsufficientArmSize, MissingArm, SchemaMismatch, ValidationError
from uplift_lab.simulator import default_params, oracle_policy, simulate_experiment, true_cate_matrix
from uplift_lab.uplift import (
    LEARNERS, PolicyAssignment, assign_policy, cross_fit_cate, fit_meta, grid_policy, load_cate, load_policy,
    noise_margin, percent_treated, predict_cate, save_cate, save_policy,
)

SMALL = BaseLearnerConfig(n_estimators=20, max_depth=3, min_child_weight=10.0)
SHRUNK = BaseLearnerConfig(n_estimators=30, max_depth=2, min_child_weight=500.0)


@pytest.fixture(scope="module")
def null_data():
    p = default_params(n_users=20_000, seed=3).null()
    return simulate_experiment(p)[1]


@pytest.fixture(scope="module")
def sim_train(sim_small):
    return split(sim_small[2], 0.3, 0)


def test_t_learner_constant_arms():
    n = 500
    arms = np.arange(n) % 5
    ds = make_dataset(n, arms=arms, y=np.where(arms == 0, 3.0, 5.0))
    m = fit_meta("T", ds, SMALL)
    assert np.allclose(m.train_cate, 2.0, atol=1e-9)


@pytest.mark.parametrize("kind", LEARNERS)
def test_null_effects_below_noise_floor(null_data, kind):
    ds = null_data
    y, t = ds.y, ds.treatment
    c = y[t == 0]
    floor = np.array([np.sqrt(y[t == k].var(ddof=1) / (t == k).sum() + c.var(ddof=1) / c.size) for k in range(1, 5)])
    m = fit_meta(kind, ds, SHRUNK, seed=1)
    assert (np.abs(m.train_cate).mean(axis=0) < 3 * floor).all()


@pytest.mark.parametrize("kind", LEARNERS)
def test_predict_cate_contract(sim_train, kind):
    train, test = sim_train
    m = fit_meta(kind, train, SMALL, seed=2)
    assert np.abs(predict_cate(m, train.X) - m.train_cate).max() <= 1e-9
    assert predict_cate(m, train.X[:0]).shape == (0, 4)
    clones = np.repeat(test.X[:1], 3, axis=0)
    out = predict_cate(m, clones)
    assert (out == out[0]).all() and np.isfinite(out).all()
    with pytest.raises(SchemaMismatch):
        predict_cate(m, test.X[:, :3])


def test_local_configs_and_kinds(sim_train):
    train, _ = sim_train
    kinds = {"TG1": "r", "TG2": "x", "TG3": "r", "TG4": "s"}
    cfgs = {tg: SMALL.with_(max_depth=d) for tg, d in zip(kinds, (2, 3, 4, 2))}
    m = fit_meta(kinds, train, cfgs, seed=0)
    assert m.kinds == {k: v.upper() for k, v in kinds.items()} and m.learner_kind == "mixed"
    assert m.configs["TG3"].max_depth == 4
    with pytest.raises(ValidationError):
        fit_meta({"TG1": "T"}, train, SMALL)


def test_fit_meta_preconditions():
    arms = np.arange(300) % 4  # no TG4
    with pytest.raises(MissingArm):
        fit_meta("T", make_dataset(300, arms=arms), SMALL)
    with pytest.raises(InsufficientArmSize):
        fit_meta("T", make_dataset(100), SMALL)
    with pytest.raises(ValidationError):
        fit_meta("Q", make_dataset(300), SMALL)
    with pytest.raises(ValidationError):
        fit_meta("T", make_dataset(300), SMALL, propensity=1.0)


def test_fit_meta_deterministic(sim_train):
    train, _ = sim_train
    a = fit_meta("R", train, SMALL, seed=4).train_cate
    b = fit_meta("R", train, SMALL, seed=4).train_cate
    assert np.array_equal(a, b)


def test_policy_hand_rows():
    pol = assign_policy(np.array([[-1, -2, -0.5, -3], [1.0, 5.0, 5.0, 2.0], [0, 0, 0, 0], [0, 0, 0, 1e-9]]))
    assert pol.arms.tolist() == [Arm.CG, Arm.TG2, Arm.CG, Arm.TG4]
    assert assign_policy(np.array([[1.0, 2.0, 0.5, 0.1]]), margin=2.0).arms.tolist() == [Arm.CG]
    with pytest.raises(ValidationError):
        assign_policy(np.array([[np.nan, 0, 0, 0]]))


def test_percent_treated():
    pol = PolicyAssignment(np.array([0, 1, 1, 2, 4, 4, 4, 3]), "cate")
    shares = percent_treated(pol)
    # independent count
    expect = {a.name: 100.0 * sum(1 for v in pol.arms if v == a) / len(pol.arms) for a in ALL_ARMS}
    assert shares == pytest.approx(expect, abs=1e-12)
    assert abs(sum(shares.values()) - 100) <= 1e-9
    assert percent_treated(PolicyAssignment(np.zeros(9), "grid")) == {"CG": 100.0, "TG1": 0.0, "TG2": 0.0,
                                                                       "TG3": 0.0, "TG4": 0.0}
    with pytest.raises(EmptyPolicy):
        percent_treated(PolicyAssignment(np.zeros(0), "grid"))


def test_grid_policy_shares(sim_small):
    shares = percent_treated(grid_policy(sim_small[2]))
    assert all(abs(v - 20) <= 0.5 for v in shares.values())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(-100, 100), min_size=4, max_size=4), min_size=1, max_size=30),
       st.floats(0.1, 10))
def test_policy_argmax_scale_invariant(rows, k):
    cate = np.array(rows)
    assert np.array_equal(assign_policy(cate).arms, assign_policy(cate * k).arms)


def test_t_learner_scale_equivariance():
    rng = np.random.default_rng(0)
    n = 600
    arms = np.arange(n) % 5
    y = rng.integers(0, 200, n).astype(float)
    cfg = BaseLearnerConfig(n_estimators=10, max_depth=3, reg_lambda=0.0, reg_alpha=0.0, min_child_weight=1.0)
    base = fit_meta("T", make_dataset(n, arms=arms, y=y), cfg).train_cate
    for k in (2, 3, 7):
        scaled = fit_meta("T", make_dataset(n, arms=arms, y=y * k), cfg).train_cate
        assert np.allclose(scaled, k * base, rtol=1e-9, atol=1e-9)
        assert np.array_equal(assign_policy(scaled).arms, assign_policy(base).arms)


def test_oracle_cate_policy_equals_oracle_policy(sim_small):
    params, pop, _ = sim_small
    assert np.array_equal(assign_policy(true_cate_matrix(pop.X, params)).arms, oracle_policy(pop.X, params).arms)


def test_null_cg_share_monotone_in_margin(null_data):
    m = fit_meta("T", null_data, SMALL, seed=0)
    shares = [percent_treated(assign_policy(m.train_cate, margin=eps))["CG"] for eps in np.linspace(0, 40, 21)]
    assert all(b >= a for a, b in zip(shares, shares[1:]))
    assert shares[-1] > shares[0]


def test_cross_fit_and_noise_margin(sim_train, null_data):
    train, _ = sim_train
    oof = cross_fit_cate("T", train, SMALL, folds=3, seed=1)
    assert oof.shape == (len(train), 4) and np.isfinite(oof).all()
    assert np.array_equal(oof, cross_fit_cate("T", train, SMALL, folds=3, seed=1))
    with pytest.raises(ValidationError):
        cross_fit_cate("T", train, SMALL, folds=1)
    tr, te = split(null_data, 0.3, 0)
    margin = noise_margin("T", tr, SMALL, seed=0)
    assert margin > 0
    cate = predict_cate(fit_meta("T", tr, SMALL), te.X)
    assert percent_treated(assign_policy(cate, margin=margin))["CG"] >= 95.0


def test_cate_and_policy_files(tmp_path):
    ids = np.array(["a", "b", "c"])
    cate = np.array([[0.1, -2.0, 3.0, 1e-17], [0, 0, 0, 0], [5.5, 1, 2, 3]])
    save_cate(ids, cate, tmp_path / "c.csv")
    back_ids, back = load_cate(tmp_path / "c.csv")
    assert np.array_equal(back_ids, ids) and np.array_equal(back, cate)
    pol = assign_policy(cate, user_ids=ids)
    save_policy(pol, tmp_path / "p.csv")
    loaded = load_policy(tmp_path / "p.csv")
    assert np.array_equal(loaded.arms, pol.arms) and loaded.provenance == "cate"
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "user_id,cate_tg1,cate_tg2,cate_tg3,cate_tg4"
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "user_id,arm,provenance"
