import math

import numpy as np
import pytest

from riskadapt.errors import EmptyPartitionError
from riskadapt.riskfeat import Predicate, RiskFeature
from riskadapt.riskmodel import (
    DnnRiskFeature,
    EquivalenceDistribution,
    RankFitConfig,
    RiskModel,
    ScoredWorkload,
    aggregate,
    dnn_feature_fit,
    fit_ranking,
    hinge_objective,
    inv_softplus,
    load_risk_model,
    quantile_multiplier,
    rank_by_risk,
    ranked_risk_table,
    save_risk_model,
    score_var,
    score_workload,
    softplus,
    weighted_moments,
)

CHANNELS = ("year_eq", "title_jaccard")


def make_features(mu_vals, sigma2_vals=None):
    sigma2_vals = sigma2_vals or [0.01] * len(mu_vals)
    return [
        RiskFeature(f"rf_{i}", (Predicate(0, "<=", 0.5),),
                    1 if mu > 0.5 else 0, 10, mu, s2)
        for i, (mu, s2) in enumerate(zip(mu_vals, sigma2_vals))
    ]


def make_model(mu_vals, sigma2_vals=None, weights=None, dnn_sigma2=0.01, u=1.0):
    features = make_features(mu_vals, sigma2_vals)
    dnn = DnnRiskFeature(np.full(10, dnn_sigma2), float(inv_softplus(u)))
    model = RiskModel.initial(features, dnn)
    if weights is not None:
        model.weight_raw = inv_softplus(np.asarray(weights, dtype=float))
    return model


# --- calibration -----------------------------------------------------------

def test_pure_bin_hits_variance_floor():
    mu_hat = np.array([0.05, 0.08, 0.95, 0.97])
    y = np.array([0, 0, 1, 1])
    dnn = dnn_feature_fit(mu_hat, y, bins=10)
    assert dnn.sigma2[0] == pytest.approx(1e-4)
    assert dnn.sigma2[9] == pytest.approx(1e-4)


def test_half_half_bin_is_quarter():
    mu_hat = np.array([0.55, 0.56, 0.57, 0.58, 0.05, 0.95])
    y = np.array([1, 0, 1, 0, 0, 1])
    dnn = dnn_feature_fit(mu_hat, y, bins=10)
    assert dnn.sigma2[5] == pytest.approx(0.25)


def test_bins_match_group_by_oracle():
    rng = np.random.default_rng(3)
    mu_hat = rng.uniform(size=400)
    y = rng.integers(0, 2, size=400)
    bins = 10
    dnn = dnn_feature_fit(mu_hat, y, bins=bins)
    for b in range(bins):
        members = [yy for mh, yy in zip(mu_hat, y) if min(int(mh * bins), bins - 1) == b]
        if members:
            p = sum(members) / len(members)
            want = max(p - p * p, 1e-4)
            assert dnn.sigma2[b] == pytest.approx(want, rel=1e-12)


def test_empty_bin_inherits_neighbor_average():
    mu_hat = np.array([0.05, 0.06, 0.95, 0.96, 0.55, 0.56])
    y = np.array([0, 1, 1, 0, 1, 0])
    dnn = dnn_feature_fit(mu_hat, y, bins=10)
    # bins 1..4 empty: inherit mean of bin 0 and bin 5 values
    want = (dnn.sigma2[0] + dnn.sigma2[5]) / 2
    assert dnn.sigma2[2] == pytest.approx(want)


def test_calibration_rejects_empty_or_single_class():
    with pytest.raises(ValueError):
        dnn_feature_fit(np.zeros(0), np.zeros(0))
    with pytest.raises(ValueError):
        dnn_feature_fit(np.array([0.2, 0.4]), np.array([1, 1]))


# --- aggregation -----------------------------------------------------------

def test_aggregation_formula_substitution():
    # z=[1,0,1], w=[2,1,1], mu_F=[.9,.5,.1], sigma_F=[.1,?,.2], w_hat=1,
    # mu_hat=0.5, sigma_hat=0.1 -> mu=0.6, sigma2=0.005625
    z = np.array([[1.0, 0.0, 1.0]])
    mu, sigma2, n_factor = weighted_moments(
        z,
        w=np.array([2.0, 1.0, 1.0]),
        mu_f=np.array([0.9, 0.5, 0.1]),
        sigma2_f=np.array([0.01, 0.09, 0.04]),
        w_hat=np.array([1.0]),
        mu_hat=np.array([0.5]),
        sigma2_hat=np.array([0.01]),
    )
    assert n_factor[0] == pytest.approx(4.0)
    assert mu[0] == pytest.approx(0.6, abs=1e-15)
    assert sigma2[0] == pytest.approx(0.005625, abs=1e-15)


def test_aggregate_classifier_only_when_no_rules_fire():
    model = make_model([0.9, 0.1])
    dist = aggregate(model, np.zeros(2), mu_hat=0.73)
    assert dist.mu == pytest.approx(0.73, abs=1e-12)
    assert dist.sigma2 == pytest.approx(0.01, abs=1e-12)


def test_aggregate_matches_straight_line_oracle():
    rng = np.random.default_rng(7)
    model = make_model(list(rng.uniform(size=6)), list(rng.uniform(0.001, 0.2, size=6)),
                       weights=list(rng.uniform(0.2, 3.0, size=6)))
    for _ in range(100):
        z = rng.integers(0, 2, size=6).astype(float)
        mu_hat = float(rng.uniform())
        dist = aggregate(model, z, mu_hat)
        # independent elementwise recomputation
        w = [float(softplus(v)) for v in model.weight_raw]
        s2f = [math.exp(v) for v in model.log_sigma2]
        u = model.dnn.u
        w_hat = u * 2 * abs(mu_hat - 0.5) + 1e-3
        s2_hat = float(model.dnn.sigma2[min(int(mu_hat * 10), 9)])
        total_w = sum(zz * ww for zz, ww in zip(z, w)) + w_hat
        num_mu = sum(zz * ww * mf for zz, ww, mf in zip(z, w, model.rule_mu)) + w_hat * mu_hat
        num_v = sum(zz * ww * ww * ss for zz, ww, ss in zip(z, w, s2f)) + w_hat * w_hat * s2_hat
        assert dist.mu == pytest.approx(num_mu / total_w, abs=1e-12)
        assert dist.sigma2 == pytest.approx(num_v / total_w**2, abs=1e-12)
        assert 0.0 <= dist.mu <= 1.0


def test_aggregate_mu_is_convex_combination():
    rng = np.random.default_rng(11)
    model = make_model(list(rng.uniform(size=5)))
    for _ in range(50):
        z = rng.integers(0, 2, size=5).astype(float)
        mu_hat = float(rng.uniform())
        dist = aggregate(model, z, mu_hat)
        inputs = [m for zz, m in zip(z, model.rule_mu) if zz] + [mu_hat]
        assert min(inputs) - 1e-12 <= dist.mu <= max(inputs) + 1e-12


# --- value-at-risk -----------------------------------------------------------

def test_score_var_substitution():
    model = make_model([0.9])
    score = score_var(EquivalenceDistribution(0.8, 0.05**2), model)
    assert score.var_plus == pytest.approx(0.3, abs=1e-12)
    assert score.var_minus == pytest.approx(0.9, abs=1e-12)


def test_score_var_point_mass():
    model = make_model([0.9])
    score = score_var(EquivalenceDistribution(0.7, 0.0), model)
    assert score.var_plus == pytest.approx(0.3)
    assert score.var_minus == pytest.approx(0.7)


def test_sign_property_on_grid():
    model = make_model([0.9])
    mus = np.linspace(0.0, 1.0, 101)
    sigmas = np.linspace(0.0, 0.24, 100)
    for mu in mus:
        for sigma in sigmas:
            s = score_var(EquivalenceDistribution(float(mu), float(sigma) ** 2), model)
            if mu > 0.5:
                assert s.var_plus < s.var_minus
            elif mu < 0.5:
                assert s.var_plus > s.var_minus
            else:
                assert s.var_plus == s.var_minus


def test_var_duality_under_mirroring():
    model = make_model([0.9])
    rng = np.random.default_rng(13)
    for _ in range(200):
        mu = float(rng.uniform())
        sigma2 = float(rng.uniform(0, 0.3)) ** 2
        direct = score_var(EquivalenceDistribution(mu, sigma2), model).var_plus
        mirrored = score_var(EquivalenceDistribution(1.0 - mu, sigma2), model).var_minus
        assert direct == pytest.approx(mirrored, abs=1e-12)


def test_quantile_multiplier():
    assert quantile_multiplier(0.975) == 2.0
    assert quantile_multiplier(0.5 + 1e-9) == pytest.approx(0.0, abs=1e-6)
    from scipy.stats import norm
    assert quantile_multiplier(0.99) == pytest.approx(norm.ppf(0.99))


# --- ranking -----------------------------------------------------------------

def _scored_fixture(model, n, seed):
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 2, size=(n, model.m)).astype(float)
    mu_hat = rng.uniform(size=n)
    ids = [f"p{i:04d}" for i in range(n)]
    return score_workload(model, ids, z, mu_hat)


def test_rank_singleton():
    model = make_model([0.9, 0.1])
    scored = _scored_fixture(model, 1, 3)
    ranked = rank_by_risk(model, scored)
    assert len(ranked) == 1 and ranked[0][0] == "p0000"


def test_rank_descending_two():
    model = make_model([0.9])
    scored = ScoredWorkload(
        ids=["a", "b"], z=np.zeros((2, 1)), mu_hat=np.array([0.6, 0.9]),
        mu=np.array([0.5, 0.5]), sigma2=np.zeros(2),
        var_plus=np.array([0.9, 0.2]), var_minus=np.array([0.1, 0.8]),
        predicted=np.array([1, 1]), w_hat_norm=np.ones(2))
    ranked = rank_by_risk(model, scored)
    assert [r for _, r in ranked] == [0.9, 0.2]


def test_rank_matches_sort_oracle():
    model = make_model([0.9, 0.2, 0.6])
    scored = _scored_fixture(model, 200, 17)
    ranked = rank_by_risk(model, scored)
    oracle = sorted(zip(scored.ids, scored.risk), key=lambda t: (-t[1], t[0]))
    assert ranked == [(pid, float(r)) for pid, r in oracle]


def test_ranked_risk_table_layout():
    model = make_model([0.9, 0.2, 0.6])
    scored = _scored_fixture(model, 50, 19)
    table = ranked_risk_table(model, scored, ["seed: 19"])
    lines = table.splitlines()
    assert lines[0] == "# seed: 19"
    assert lines[1] == "pair_id,predicted,risk,mu,sigma"
    risks = [float(line.split(",")[2]) for line in lines[2:]]
    assert risks == sorted(risks, reverse=True)
    assert len(risks) == 50


# --- fitting -----------------------------------------------------------------

def test_hinge_values():
    # margin satisfied -> 0; short gap -> margin - gap
    assert max(0.0, 0.5 - (0.9 - 0.2)) == 0.0
    assert max(0.0, 0.5 - (0.4 - 0.3)) == pytest.approx(0.4)
    model = make_model([0.9, 0.1])
    scored = _scored_fixture(model, 40, 5)
    loss, *_ = hinge_objective(model.weight_raw, model.log_sigma2, model.dnn.u_raw,
                               model, scored, np.array([0, 1]), np.array([2, 3]), 0.5)
    a, b = scored.risk[[0, 1]], scored.risk[[2, 3]]
    want = np.mean(np.maximum(0.0, 0.5 - (a - b)))
    assert loss == pytest.approx(float(want), abs=1e-12)


def test_hinge_gradients_match_finite_differences():
    rng = np.random.default_rng(23)
    model = make_model(list(rng.uniform(size=5)), list(rng.uniform(0.005, 0.1, size=5)),
                       weights=list(rng.uniform(0.3, 2.0, size=5)))
    scored = _scored_fixture(model, 60, 29)
    ia = rng.integers(0, 60, size=16)
    ib = rng.integers(0, 60, size=16)

    def objective(w_raw, ls2, u_raw):
        return hinge_objective(w_raw, ls2, u_raw, model, scored, ia, ib, 0.3)[0]

    w0, s0, u0 = model.weight_raw.copy(), model.log_sigma2.copy(), model.dnn.u_raw
    _, g_w, g_s, g_u = hinge_objective(w0, s0, u0, model, scored, ia, ib, 0.3)
    h = 1e-6

    def check(analytic, numeric):
        scale = max(abs(analytic), abs(numeric))
        if scale > 1e-7:
            assert abs(analytic - numeric) / scale < 1e-3
        else:
            assert abs(analytic - numeric) < 1e-8

    for j in range(5):
        for arr, grad in ((w0, g_w), (s0, g_s)):
            orig = arr[j]
            arr[j] = orig + h
            up = objective(w0, s0, u0)
            arr[j] = orig - h
            down = objective(w0, s0, u0)
            arr[j] = orig
            check(grad[j], (up - down) / (2 * h))
    up = objective(w0, s0, u0 + h)
    down = objective(w0, s0, u0 - h)
    check(g_u, (up - down) / (2 * h))


def _validation_fixture(model, n, seed):
    """Mispredictions carry a recognizable activation signature."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    mu_hat = np.where(y == 1, rng.uniform(0.55, 0.95, n), rng.uniform(0.05, 0.45, n))
    flip = rng.uniform(size=n) < 0.25
    mu_hat = np.where(flip, 1.0 - mu_hat, mu_hat)  # flipped -> mispredicted
    z = np.zeros((n, model.m))
    z[:, 0] = (y == 1) & (rng.uniform(size=n) < 0.9)   # equivalent-asserting rule
    z[:, 1] = (y == 0) & (rng.uniform(size=n) < 0.9)   # inequivalent-asserting rule
    z[:, 2] = rng.integers(0, 2, size=n)               # noise rule
    ids = [f"v{i:04d}" for i in range(n)]
    return score_workload(model, ids, z, mu_hat), y, z, mu_hat


def test_fit_ranking_separates_mispredictions():
    """After fitting, mispredictions sit strictly higher (numerically lower
    mean rank position) than correct instances on a held-out half."""
    model = make_model([0.95, 0.05, 0.5])
    scored, y, z, mu_hat = _validation_fixture(model, 400, 31)
    fitted = fit_ranking(model, scored, y, RankFitConfig(seed=7))
    held, y2, _, _ = _validation_fixture(fitted, 400, 32)
    rescored = score_workload(fitted, held.ids, held.z, held.mu_hat)
    position = {pid: rank for rank, (pid, _) in enumerate(rank_by_risk(fitted, rescored))}
    ranks = np.array([position[pid] for pid in rescored.ids])
    wrong = rescored.predicted != y2
    assert wrong.any() and (~wrong).any()
    assert ranks[wrong].mean() < ranks[~wrong].mean()
    assert rescored.risk[wrong].mean() > rescored.risk[~wrong].mean()


def test_fit_ranking_keeps_priors_and_positivity():
    model = make_model([0.95, 0.05, 0.5])
    mu_before = model.rule_mu.copy()
    scored, y, _, _ = _validation_fixture(model, 300, 41)
    fitted = model
    for step_seed in range(5):
        fitted = fit_ranking(fitted, scored, y, RankFitConfig(steps=50, seed=step_seed))
        assert np.all(fitted.rule_weights >= 0.0)
        assert np.all(fitted.rule_sigma2 > 0.0)
        assert fitted.dnn.u >= 0.0
    assert np.array_equal(fitted.rule_mu, mu_before)


def test_fit_ranking_empty_partition():
    model = make_model([0.9])
    scored = _scored_fixture(model, 10, 43)
    all_right = scored.predicted.copy()
    with pytest.raises(EmptyPartitionError, match="keep the previous"):
        fit_ranking(model, scored, all_right, RankFitConfig())


def test_fit_ranking_deterministic():
    model = make_model([0.95, 0.05, 0.5])
    scored, y, _, _ = _validation_fixture(model, 200, 47)
    a = fit_ranking(model, scored, y, RankFitConfig(seed=3))
    b = fit_ranking(model, scored, y, RankFitConfig(seed=3))
    assert np.array_equal(a.weight_raw, b.weight_raw)
    assert np.array_equal(a.log_sigma2, b.log_sigma2)
    assert a.dnn.u_raw == b.dnn.u_raw


# --- persistence -----------------------------------------------------------

def test_risk_model_roundtrip_exact(tmp_path):
    model = make_model([0.95, 0.05, 0.5])
    scored, y, _, _ = _validation_fixture(model, 200, 53)
    fitted = fit_ranking(model, scored, y, RankFitConfig(seed=5))
    path = tmp_path / "risk.txt"
    save_risk_model(fitted, CHANNELS, path)
    loaded, names = load_risk_model(path)
    assert names == list(CHANNELS)
    assert np.array_equal(loaded.weight_raw, fitted.weight_raw)
    assert np.array_equal(loaded.log_sigma2, fitted.log_sigma2)
    assert np.array_equal(loaded.dnn.sigma2, fitted.dnn.sigma2)
    assert loaded.dnn.u_raw == fitted.dnn.u_raw
    assert loaded.theta == fitted.theta
    assert [f.id for f in loaded.features] == [f.id for f in fitted.features]
    assert np.array_equal(loaded.rule_mu, fitted.rule_mu)
    save_risk_model(loaded, names, tmp_path / "risk2.txt")
    assert (tmp_path / "risk.txt").read_bytes() == (tmp_path / "risk2.txt").read_bytes()
