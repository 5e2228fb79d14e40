import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jccs.grid import DG, RadialNetwork, builtin_network, lindistflow, nominal_injection
from jccs.milp import MilpOptions, solve_milp
from jccs.neural import MlpModel, forward
from jccs.opt import (
    CaseSetup,
    DispatchResult,
    OptError,
    build_p3,
    demand_instance,
    draw_scenarios,
    feature_map,
    lindist_rows,
    prune_rows,
    scenario_count,
    solve_b1_on,
    solve_b1_saa,
    solve_b1_scenario,
    solve_p3,
    solve_p3_direct,
    solve_risk_neutral,
)
from jccs.uncertainty import OmegaSpec, nominal_features

EPS = (0.05, 0.1, 0.15, 0.2)


@pytest.fixture(scope="module")
def net():
    return builtin_network()


def constant_models(net, q_value, loss_value=0.0, qhidden=(25, 25, 25), lhidden=(10, 10, 10)):
    d = 2 * net.n_nonslack

    def zeros(sizes, out, bias, **kw):
        dims = (d,) + sizes + (out,)
        Ws = [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])]
        bs = [np.zeros(o) for o in dims[1:]]
        bs[-1][:] = bias
        return MlpModel(Ws, bs, **kw)

    q = zeros(qhidden, len(EPS), q_value, role="quantile", epsilons=EPS)
    lo = zeros(lhidden, 1, loss_value, role="loss")
    return q, lo


def random_models(net, seed, qhidden=(5, 5), lhidden=(4,)):
    """Small random networks whose inputs are standardized around the
    mid-utilization operating point so the DG features matter."""
    rng = np.random.default_rng(seed)
    pd, qd = demand_instance(net)
    A, x0 = feature_map(net, pd, qd)
    mid = A @ np.full(net.n_dg, 0.5) + x0
    d = mid.size

    def make(sizes, out, **kw):
        dims = (d,) + sizes + (out,)
        Ws = [rng.normal(size=(o, i)) / math.sqrt(i) for i, o in zip(dims[:-1], dims[1:])]
        bs = [rng.normal(scale=0.3, size=o) for o in dims[1:]]
        return MlpModel(Ws, bs, x_mean=mid, x_scale=np.full(d, 0.05), **kw)

    q = make(qhidden, len(EPS), role="quantile", epsilons=EPS)
    lo = make(lhidden, 1, role="loss", y_scale=0.01)
    return q, lo


def setup_for(net, q, lo, eps=0.1, rho=0.0):
    pd, qd = demand_instance(net)
    return CaseSetup(net, pd, qd, eps, rho, q, lo)


def grid_optimum(setup, n=201):
    g = np.linspace(0, 1, n)
    L = np.array(list(itertools.product(g, g)))
    X = np.array([setup.features(lam) for lam in L])
    qv = forward(setup.quantile_model, X)[:, setup.head] + setup.rho
    G = np.sum(setup.pd) + forward(setup.loss_model, X)[:, 0] - L @ setup.network.g_bar_pu
    ok = qv <= 0
    return (float(G[ok].min()) if ok.any() else math.inf), L, ok


class TestP3:
    def test_binary_count(self, net):
        q, lo = random_models(net, 0, (25, 25, 25), (10, 10, 10))
        model = build_p3(setup_for(net, q, lo))
        assert model.n_binaries == 105
        assert model.problem.n_binaries == 105

    def test_lambda_fixed_at_zero(self, net):
        q, lo = random_models(net, 1)
        s = setup_for(net, q, lo, rho=0.0)
        s.quantile_model = constant_models(net, -1.0)[0]
        model = build_p3(s, np.zeros(2), np.zeros(2))
        sol = solve_milp(model.problem)
        x0 = feature_map(net, s.pd, s.qd)[1]
        expect = float(np.sum(s.pd) + forward(lo, x0)[0])
        assert sol.status == "optimal"
        assert sol.objective == pytest.approx(expect, abs=1e-9)

    @pytest.mark.parametrize("solver", [solve_p3, solve_p3_direct])
    def test_vacuous_constraint_maximizes_dg(self, net, solver):
        q, lo = constant_models(net, -1.0, 0.0)
        res = solver(setup_for(net, q, lo))
        assert res.status == "optimal"
        np.testing.assert_allclose(res.lam, [1.0, 1.0], atol=1e-9)
        assert res.expected_G == pytest.approx(np.sum(net.pd_pu) - np.sum(net.g_bar_pu), abs=1e-9)

    @pytest.mark.parametrize("solver", [solve_p3, solve_p3_direct])
    def test_impossible_constraint_infeasible(self, net, solver):
        q, lo = constant_models(net, 1.0)
        res = solver(setup_for(net, q, lo))
        assert res.status == "infeasible" and res.lam is None
        assert "risk level" in res.message

    def test_setup_validation(self, net):
        q, lo = constant_models(net, -1.0)
        with pytest.raises(OptError, match="heads"):
            setup_for(net, q, lo, eps=0.3)
        with pytest.raises(OptError):
            setup_for(net, q, lo, rho=-0.1)
        with pytest.raises(OptError):
            setup_for(net, q, lo, eps=1.0)
        with pytest.raises(OptError):
            setup_for(net, lo, q)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0.5, 1.5))
    def test_affine_features_match_injections(self, a, b, scale):
        net = builtin_network()
        pd, qd = demand_instance(net, scale)
        A, x0 = feature_map(net, pd, qd)
        lam = np.array([a, b])
        np.testing.assert_allclose(A @ lam + x0, nominal_features(net, lam, pd, qd), atol=1e-12)
        if scale == 1.0:
            inj = nominal_injection(net, lam)
            np.testing.assert_allclose(A @ lam + x0, np.concatenate([inj.p, inj.q]), atol=1e-9)

    def test_feature_map_with_reactive_ratio(self):
        net = RadialNetwork([1, 2, 3], [0, 0.1, 0.2], [0, 0.05, 0.0],
                            [(1, 2, 0.01, 0.01), (2, 3, 0.01, 0.01)], 1, s_base=1.0,
                            v_base=1.0, slack_kv=1.0, i_max_ka=10.0,
                            dgs=[DG(3, 0.3, 0.0), DG(2, 0.2, 0.5)])
        A, x0 = feature_map(net, net.pd_pu, net.qd_pu)
        np.testing.assert_allclose(A, [[0, 0.2], [0.3, 0], [0, 0.1], [0, 0]])
        np.testing.assert_allclose(x0, [-0.1, -0.2, -0.05, 0.0])

    @pytest.mark.parametrize("seed", range(6))
    def test_box_splitting_matches_direct_and_grid(self, net, seed):
        q, lo = random_models(net, seed)
        s = setup_for(net, q, lo, eps=EPS[seed % 4])
        split = solve_p3(s)
        direct = solve_p3_direct(s)
        best_grid, _, _ = grid_optimum(s)
        assert split.status == direct.status
        if split.status == "infeasible":
            assert best_grid == math.inf
            return
        a, b = split.details["milp_objective"], direct.details["milp_objective"]
        assert a == pytest.approx(b, abs=1e-7)
        assert a <= best_grid + 1e-9
        # surrogate and objective consistency at the returned point
        assert split.details["surrogate_violation"] <= 1e-6
        assert split.expected_G == pytest.approx(a, abs=1e-6)
        x = s.features(split.lam)
        recomputed = np.sum(s.pd) + forward(lo, x)[0] - split.lam @ net.g_bar_pu
        assert split.expected_G == pytest.approx(recomputed, abs=1e-6)

    def test_constraint_active_in_some_random_case(self, net):
        active = 0
        for seed in range(6):
            q, lo = random_models(net, seed)
            res = solve_p3(setup_for(net, q, lo, eps=EPS[seed % 4]))
            if res.lam is not None and res.lam.min() < 1 - 1e-6:
                active += 1
        assert active >= 2

    def test_feature_box_warning(self, net):
        q, lo = constant_models(net, -1.0)
        s = setup_for(net, q, lo)
        A, x0 = feature_map(net, s.pd, s.qd)
        s.feature_box = (x0 - 1e-3, x0 + 1e-3)
        with pytest.warns(UserWarning, match="training box"):
            build_p3(s)

    def test_deterministic(self, net):
        q, lo = random_models(net, 3)
        s = setup_for(net, q, lo)
        a, b = solve_p3(s), solve_p3(s)
        assert np.array_equal(a.lam, b.lam) and a.nodes == b.nodes


class TestDispatchResult:
    def test_validation(self):
        with pytest.raises(OptError):
            DispatchResult("B2", 0.1, np.ones(2), 0.0, "optimal")
        with pytest.raises(OptError):
            DispatchResult("P3", 0.1, np.array([1.2, 0.0]), 0.0, "optimal")

    def test_row(self):
        r = DispatchResult("B3", 0.0, np.array([0.5, 1.0]), 0.1, "optimal", wall_time=0.2)
        row = r.row()
        assert row["lambda_1"] == 0.5 and row["lambda_2"] == 1.0 and row["method"] == "B3"


def two_bus(g_bar, p_load=0.1, q_load=0.0, r=0.05, x=0.05):
    return RadialNetwork([1, 2], [0.0, p_load], [0.0, q_load], [(1, 2, r, x)], 1, s_base=1.0,
                         v_base=1.0, slack_kv=1.0, i_max_ka=100.0, dgs=[DG(2, g_bar)])


class TestScenarioCount:
    def test_values(self):
        assert scenario_count(0.1, 0.05, 2) == 100
        assert scenario_count(0.1, 0.05, 3) == 120
        assert scenario_count(0.05, 0.05, 2) == 200

    def test_validation(self):
        for args in [(0, 0.05, 2), (0.1, 1.0, 2), (0.1, 0.05, 0)]:
            with pytest.raises(OptError):
                scenario_count(*args)


class TestLinDistFlowBenchmarks:
    def test_risk_neutral_unbinding(self):
        net = two_bus(g_bar=0.05)
        res = solve_risk_neutral(net, net.pd_pu, net.qd_pu)
        assert res.method == "B3" and res.status == "optimal"
        np.testing.assert_allclose(res.lam, [1.0])
        assert res.expected_G == pytest.approx(0.1 - 0.05)

    def test_risk_neutral_voltage_binding_toy(self):
        # v2 = 1 + 2 r (lam g - pd) - 2 x qd <= 1.1^2
        g, pd, qd, r, x = 5.0, 0.1, 0.02, 0.05, 0.05
        net = two_bus(g, pd, qd, r, x)
        res = solve_risk_neutral(net, net.pd_pu, net.qd_pu)
        lam_star = ((1.1**2 - 1) / 2 + r * pd + x * qd) / (r * g)
        assert 0 < lam_star < 1
        assert res.lam[0] == pytest.approx(lam_star, abs=1e-9)

    def test_no_uncertainty_b1_equals_b3(self, net):
        pd, qd = demand_instance(net)
        b1 = solve_b1_scenario(net, pd, qd, 0.1, OmegaSpec.degenerate(0.0))
        b3 = solve_risk_neutral(net, pd, qd)
        assert b1.details["scenarios"] == 100
        np.testing.assert_allclose(b1.lam, b3.lam, atol=1e-9)
        assert b1.expected_G == pytest.approx(b3.expected_G, abs=1e-12)

    def test_b1_more_conservative_than_b3(self, net):
        pd, qd = demand_instance(net)
        b1 = solve_b1_scenario(net, pd, qd, 0.1, OmegaSpec.case(1))
        b3 = solve_risk_neutral(net, pd, qd)
        assert b1.expected_G >= b3.expected_G - 1e-12

    def test_rows_match_lindistflow(self, net):
        pd, qd = demand_instance(net)
        omega = np.array([0.1, -0.2])
        lam = np.array([0.7, 0.4])
        G, h = lindist_rows(net, pd, qd, omega)
        ld = lindistflow(net)
        p = -pd.copy()
        p[net.dg_positions] += lam * net.g_bar_pu * (1 + omega)
        q = -qd.copy()
        v2 = ld.voltage_sq(p, q)
        n = net.n_nonslack
        np.testing.assert_allclose((G @ lam - h)[:n], v2 - net.v_max**2, atol=1e-12)
        np.testing.assert_allclose((G @ lam - h)[n:2 * n], net.v_min**2 - v2, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(3, 12))
    def test_pruning_preserves_region(self, seed, m):
        rng = np.random.default_rng(seed)
        G = rng.normal(size=(m, 2))
        h = rng.uniform(-0.5, 1.5, size=m)
        keep = prune_rows(G, h, [0, 0], [1, 1])
        g = np.linspace(0, 1, 41)
        P = np.array(list(itertools.product(g, g)))
        full = np.all(P @ G.T <= h + 1e-12, axis=1)
        kept = np.all(P @ G[keep].T <= h[keep] + 1e-12, axis=1)
        assert np.array_equal(full, kept)


def saa_oracle(net, pd, qd, omegas, budget):
    """Enumerate every set of at most ``budget`` dropped scenarios."""
    best = math.inf
    N = len(omegas)
    for k in range(budget + 1):
        for drop in itertools.combinations(range(N), k):
            rest = [w for i, w in enumerate(omegas) if i not in drop]
            res = solve_b1_on(net, pd, qd, 0.1, np.array(rest))
            if res.lam is not None:
                best = min(best, res.expected_G)
    return best


class TestSaa:
    def test_zero_risk_equals_scenario_approach(self, net):
        pd, qd = demand_instance(net)
        om = draw_scenarios(OmegaSpec.case(1), 40, 3, 2)
        saa = solve_b1_saa(net, pd, qd, 0.0, om)
        b1 = solve_b1_on(net, pd, qd, 0.0, om)
        assert saa.method == "B1-SAA" and saa.details["budget"] == 0
        assert saa.expected_G == pytest.approx(b1.expected_G, abs=1e-9)

    def test_budget_respected_on_recheck(self, net):
        pd, qd = demand_instance(net)
        om = draw_scenarios(OmegaSpec.gaussian(0.3), 10, 5, 2)
        res = solve_b1_saa(net, pd, qd, 0.2, om)
        violated = 0
        for w in om:
            G, h = lindist_rows(net, pd, qd, w)
            violated += bool(np.any(G @ res.lam - h > 1e-7))
        assert res.details["budget"] == 2
        assert violated <= 2
        # a scenario allowed to fail may still happen to be satisfied
        assert violated <= len(res.details["violated"])

    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_subset_enumeration(self, net, seed):
        pd, qd = demand_instance(net)
        om = draw_scenarios(OmegaSpec.gaussian(0.3), 12, seed, 2)
        res = solve_b1_saa(net, pd, qd, 0.25, om)
        assert res.status == "optimal"
        assert res.expected_G == pytest.approx(saa_oracle(net, pd, qd, om, 3), abs=1e-7)

    def test_looser_budget_never_costs_more(self, net):
        pd, qd = demand_instance(net)
        om = draw_scenarios(OmegaSpec.case(2), 60, 0, 2)
        g = [solve_b1_saa(net, pd, qd, e, om).expected_G for e in (0.0, 0.05, 0.1, 0.2)]
        assert all(b <= a + 1e-9 for a, b in zip(g, g[1:]))

    def test_solver_limit_flagged(self, net):
        pd, qd = demand_instance(net)
        om = draw_scenarios(OmegaSpec.gaussian(0.3), 30, 0, 2)
        res = solve_b1_saa(net, pd, qd, 0.2, om, MilpOptions(node_limit=1))
        assert res.status in ("node_limit", "optimal")
        if res.status == "node_limit":
            assert res.message
