import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jccs.milp import (
    BINARY,
    BoundedSimplex,
    MilpOptions,
    MilpProblem,
    NeuronBounds,
    encode_mlp,
    propagate_bounds,
    read_lp,
    solve_lp,
    solve_milp,
)
from jccs.neural import MlpModel, forward


def random_net(sizes, seed):
    rng = np.random.default_rng(seed)
    Ws = [rng.normal(size=(o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    bs = [rng.normal(size=o) for o in sizes[1:]]
    if sizes[-1] == 1:
        return MlpModel(Ws, bs)
    return MlpModel(Ws, bs, role="quantile", epsilons=tuple(np.linspace(0.1, 0.5, sizes[-1])))


# -- oracles -----------------------------------------------------------------

def vertex_enumeration(A, b, c):
    """min c x s.t. A x <= b by checking every basic solution (bounded polytopes)."""
    m, n = A.shape
    best = math.inf
    for rows in itertools.combinations(range(m), n):
        M = A[list(rows)]
        if abs(np.linalg.det(M)) < 1e-10:
            continue
        x = np.linalg.solve(M, b[list(rows)])
        if np.all(A @ x <= b + 1e-9):
            best = min(best, float(c @ x))
    return best


def enumerate_mixed(Ab, Ay, senses, rhs, cb, cy, y_hi):
    """Exhaustive search over binaries; the single continuous y in [0, y_hi]
    is optimized in closed form by intersecting its feasible interval."""
    best = math.inf
    nb = Ab.shape[1]
    for bits in itertools.product([0, 1], repeat=nb):
        z = np.array(bits, dtype=float)
        lo, hi = 0.0, y_hi
        ok = True
        for a_b, a_y, s, r in zip(Ab, Ay, senses, rhs):
            rest = r - a_b @ z
            if a_y == 0:
                viol = {"<=": rest < -1e-12, ">=": rest > 1e-12, "=": abs(rest) > 1e-12}[s]
                ok &= not viol
                continue
            bound = rest / a_y
            if s == "=":
                lo, hi = max(lo, bound), min(hi, bound)
            elif (s == "<=") == (a_y > 0):
                hi = min(hi, bound)
            else:
                lo = max(lo, bound)
        if not ok or lo > hi + 1e-12:
            continue
        y = lo if cy >= 0 else hi
        best = min(best, float(cb @ z + cy * y))
    return best


def random_mixed_problem(seed, nb):
    rng = np.random.default_rng(seed)
    m = rng.integers(2, 5)
    Ab = rng.integers(-6, 7, size=(m, nb)).astype(float)
    Ay = rng.integers(-3, 4, size=m).astype(float)
    senses = list(rng.choice(["<=", ">=", "<="], size=m))
    z0 = rng.integers(0, 2, nb)
    rhs = Ab @ z0 + Ay * 1.5 + np.where(np.array(senses) == "<=", 2.0, -2.0)
    cb = rng.integers(-10, 11, nb).astype(float)
    cy = float(rng.integers(-5, 6))
    p = MilpProblem()
    zs = [p.add_var(f"z{i}", 0, 1, BINARY) for i in range(nb)]
    y = p.add_var("y", 0, 4.0)
    for a_b, a_y, s, r in zip(Ab, Ay, senses, rhs):
        row = {zs[i]: a_b[i] for i in range(nb) if a_b[i]}
        if a_y:
            row[y] = a_y
        p.add_constraint(row, s, r)
    p.set_objective({**{zs[i]: cb[i] for i in range(nb)}, y: cy})
    return p, (Ab, Ay, senses, rhs, cb, cy, 4.0)


# -- simplex -----------------------------------------------------------------

class TestLp:
    def test_one_row(self):
        p = MilpProblem()
        x = p.add_var("x", -10, 10)
        p.add_constraint({x: 1}, ">=", 3)
        p.set_objective({x: 1})
        assert solve_lp(p).objective == pytest.approx(3.0, abs=1e-12)

    def test_textbook(self):
        p = MilpProblem()
        x, y = p.add_var("x", 0, 1), p.add_var("y", 0, 1)
        p.add_constraint({x: 1, y: 1}, "<=", 1)
        p.set_objective({x: -1, y: -1})
        assert solve_lp(p).objective == pytest.approx(-1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_vertex_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        n, m = rng.integers(2, 4), rng.integers(2, 6)
        A = rng.normal(size=(m, n))
        x0 = rng.uniform(-1, 1, n)
        b = A @ x0 + rng.uniform(0, 1, m)
        c = rng.normal(size=n)
        p = MilpProblem()
        xs = [p.add_var(f"x{i}", -3, 3) for i in range(n)]
        for row, r in zip(A, b):
            p.add_constraint(dict(zip(xs, row)), "<=", r)
        p.set_objective(dict(zip(xs, c)))
        box = np.vstack([A, np.eye(n), -np.eye(n)])
        rhs = np.concatenate([b, np.full(2 * n, 3.0)])
        sol = solve_lp(p)
        assert sol.status == "optimal"
        assert sol.objective == pytest.approx(vertex_enumeration(box, rhs, c), abs=1e-7)
        assert p.max_violation(sol.x) <= 1e-7

    def test_infeasible(self):
        p = MilpProblem()
        x = p.add_var("x", 0, 1)
        p.add_constraint({x: 1}, ">=", 2)
        p.set_objective({x: 1})
        assert solve_lp(p).status == "infeasible"

    def test_unbounded(self):
        p = MilpProblem()
        x, y = p.add_var("x", 0), p.add_var("y", 0)
        p.add_constraint({x: 1, y: -1}, "<=", 1)
        p.set_objective({x: -1})
        assert solve_lp(p).status == "unbounded"

    def test_free_variables_and_equalities(self):
        p = MilpProblem()
        x = p.add_var("x", -math.inf, math.inf)
        y = p.add_var("y", -math.inf, math.inf)
        p.add_constraint({x: 1, y: 1}, "=", 2)
        p.add_constraint({x: 1, y: -1}, "=", 0)
        p.set_objective({x: 1})
        s = solve_lp(p)
        assert s.status == "optimal"
        np.testing.assert_allclose(s.x, [1.0, 1.0], atol=1e-12)

    def test_degenerate_cycling_example(self):
        # classic example that cycles under textbook Dantzig pricing
        p = MilpProblem()
        x = [p.add_var(f"x{i}", 0) for i in range(4)]
        p.add_constraint({x[0]: 0.25, x[1]: -8, x[2]: -1, x[3]: 9}, "<=", 0)
        p.add_constraint({x[0]: 0.5, x[1]: -12, x[2]: -0.5, x[3]: 3}, "<=", 0)
        p.add_constraint({x[2]: 1}, "<=", 1)
        p.set_objective({x[0]: -0.75, x[1]: 20, x[2]: -0.5, x[3]: 6})
        s = solve_lp(p)
        assert s.status == "optimal" and s.objective == pytest.approx(-1.25, abs=1e-9)

    def test_pivot_budget_is_per_solve(self):
        # a reused engine must not run out of pivots across many re-solves
        rng = np.random.default_rng(0)
        A = np.hstack([rng.uniform(0.1, 1.0, size=(6, 6)), np.eye(6)])
        c = np.concatenate([-np.ones(6), np.zeros(6)])
        lb, ub = np.zeros(12), np.full(12, np.inf)
        eng = BoundedSimplex(A, np.ones(6), c, lb, ub, {i: 6 + i for i in range(6)}, max_iter=30)
        assert eng.solve() == "optimal"
        for k in range(40):
            hi = ub.copy()
            hi[k % 6] = 0.05 * (k % 3)
            eng.set_bounds(lb, hi)
            assert eng.resolve(eng.snapshot() if k % 2 else None) == "optimal"
            assert eng.solve() == "optimal"
        assert eng.iterations > 3 * eng.max_iter

    def test_fixed_variables_folded(self):
        p = MilpProblem()
        x, y = p.add_var("x", 2, 2), p.add_var("y", 0, 5)
        p.add_constraint({x: 1, y: 1}, "<=", 4)
        p.set_objective({x: 1, y: -1}, constant=0.5)
        s = solve_lp(p)
        assert s.objective == pytest.approx(0.5) and s.x[0] == 2


# -- branch and bound ---------------------------------------------------------

class TestBranchAndBound:
    def test_all_fixed_reduces_to_lp(self):
        p = MilpProblem()
        z = p.add_var("z", 1, 1, BINARY)
        y = p.add_var("y", 0, 10)
        p.add_constraint({y: 1, z: 2}, ">=", 5)
        p.set_objective({y: 1})
        assert solve_milp(p).objective == pytest.approx(solve_lp(p).objective, abs=1e-12)

    def test_knapsack(self):
        rng = np.random.default_rng(42)
        w, v = rng.integers(1, 20, 8), rng.integers(1, 30, 8)
        cap = int(w.sum() // 2)
        p = MilpProblem()
        xs = [p.add_var(f"b{i}", 0, 1, BINARY) for i in range(8)]
        p.add_constraint(dict(zip(xs, w)), "<=", cap)
        p.set_objective(dict(zip(xs, -v)))
        best = min(-v @ np.array(c) for c in itertools.product([0, 1], repeat=8) if w @ np.array(c) <= cap)
        assert solve_milp(p).objective == pytest.approx(best, abs=1e-7)

    @pytest.mark.parametrize("seed", range(20))
    def test_random_vs_enumeration(self, seed):
        nb = 6 + seed % 7
        p, data = random_mixed_problem(seed, nb)
        expect = enumerate_mixed(*data)
        sol = solve_milp(p)
        if expect == math.inf:
            assert sol.status == "infeasible"
            return
        assert sol.status == "optimal"
        assert sol.objective == pytest.approx(expect, abs=1e-7)
        assert p.max_violation(sol.x) <= 1e-7
        assert p.integrality_violation(sol.x) <= 1e-6
        assert sol.bound <= sol.objective + 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_correlated_knapsacks_vs_enumeration(self, seed):
        # correlated weights and values give fractional relaxations and deep trees
        rng = np.random.default_rng(100 + seed)
        nb = 10 + seed % 3
        W = rng.integers(5, 40, size=(3, nb)).astype(float)
        v = W.mean(axis=0) + rng.integers(0, 6, nb)
        cap = np.floor(W.sum(axis=1) * 0.45)
        Ab = np.vstack([W, np.r_[3.0, -2.0, np.zeros(nb - 2)]])
        Ay = np.array([0, 0, 0, 1.0])
        senses, rhs = ["<=", "<=", "<=", "="], np.r_[cap, 4.5]
        p = MilpProblem()
        zs = [p.add_var(f"z{i}", 0, 1, BINARY) for i in range(nb)]
        y = p.add_var("y", 0, 10.0)
        for a_b, a_y, sense, r in zip(Ab, Ay, senses, rhs):
            row = {zs[i]: a_b[i] for i in range(nb) if a_b[i]}
            if a_y:
                row[y] = a_y
            p.add_constraint(row, sense, r)
        p.set_objective({**dict(zip(zs, -v)), y: 0.5})
        sol = solve_milp(p)
        assert sol.status == "optimal" and sol.nodes > 1
        assert sol.objective == pytest.approx(enumerate_mixed(Ab, Ay, senses, rhs, -v, 0.5, 10.0), abs=1e-7)
        assert p.max_violation(sol.x) <= 1e-7 and p.integrality_violation(sol.x) <= 1e-6
        assert sol.bound <= sol.objective + 1e-12

    def test_infeasible_root(self):
        p = MilpProblem()
        z = p.add_var("z", 0, 1, BINARY)
        p.add_constraint({z: 1}, ">=", 2)
        assert solve_milp(p).status == "infeasible"

    def test_integer_infeasible(self):
        p = MilpProblem()
        a, b = p.add_var("a", 0, 1, BINARY), p.add_var("b", 0, 1, BINARY)
        p.add_constraint({a: 2, b: 2}, "=", 1)
        assert solve_milp(p).status == "infeasible"

    def test_node_limit_reports_incumbent(self):
        p, _ = random_mixed_problem(3, 12)
        sol = solve_milp(p, MilpOptions(node_limit=1))
        assert sol.status in ("node_limit", "optimal")
        if sol.has_solution:
            assert p.max_violation(sol.x) <= 1e-7

    def test_deterministic(self):
        p, _ = random_mixed_problem(5, 10)
        a, b = solve_milp(p), solve_milp(p)
        assert a.log == b.log and np.array_equal(a.x, b.x)


# -- encoding -----------------------------------------------------------------

class TestBounds:
    def test_zero_weight_layer(self):
        m = MlpModel([np.zeros((3, 2)), np.ones((1, 3))], [np.array([1.0, -2.0, 0.5]), np.zeros(1)])
        nb = propagate_bounds(m, [-5, -5], [5, 5])
        lo, hi = nb.hidden[0]
        np.testing.assert_allclose(lo, [1.0, -2.0, 0.5], atol=1e-8)
        np.testing.assert_allclose(hi, [1.0, -2.0, 0.5], atol=1e-8)

    def test_scaling(self):
        m = MlpModel([np.array([[2.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
        lo, hi = propagate_bounds(m, [-1], [1]).hidden[0]
        assert lo[0] == pytest.approx(-2.0) and hi[0] == pytest.approx(2.0)

    def test_sampled_inputs_stay_inside(self):
        m = random_net([3, 8, 6, 2], seed=11)
        m.x_mean, m.x_scale = np.array([0.5, -1.0, 2.0]), np.array([2.0, 0.5, 1.5])
        lo, hi = np.array([-1.0, 0.0, 1.0]), np.array([2.0, 0.5, 4.0])
        nb = propagate_bounds(m, lo, hi)
        X = np.random.default_rng(0).uniform(lo, hi, size=(10_000, 3))
        s = X
        layers = m.folded_layers()
        for (W, b), (zlo, zhi) in zip(layers[:-1], nb.hidden):
            z = s @ W.T + b
            assert np.all(z >= zlo) and np.all(z <= zhi)
            s = np.maximum(z, 0)
        out = forward(m, X)
        assert np.all(out >= nb.output[0]) and np.all(out <= nb.output[1])

    def test_affine_input_map(self):
        m = random_net([4, 5, 1], seed=2)
        A = np.random.default_rng(1).normal(size=(4, 2))
        x0 = np.ones(4)
        nb = propagate_bounds(m, [0, 0], [1, 1], affine=(A, x0))
        U = np.random.default_rng(2).uniform(size=(5000, 2))
        z = (U @ A.T + x0) @ m.weights[0].T + m.biases[0]
        assert np.all(z >= nb.hidden[0][0]) and np.all(z <= nb.hidden[0][1])

    def test_unbounded_box(self):
        with pytest.raises(ValueError):
            propagate_bounds(random_net([2, 2, 1], 0), [0, -np.inf], [1, 1])


def _fixed_input_output(m, bounds, u):
    p = MilpProblem()
    ins = [p.add_var(f"u{i}", v, v) for i, v in enumerate(u)]
    enc = encode_mlp(p, m, bounds, ins, output_vars=True)
    sol = solve_milp(p)
    assert sol.status == "optimal"
    return np.array([sol.x[y] for y in enc.output_vars]), p, enc


class TestEncoding:
    def test_binary_count(self):
        m = random_net([3, 25, 25, 25, 1], seed=0)
        p = MilpProblem()
        ins = [p.add_var(f"u{i}", -1, 1) for i in range(3)]
        enc = encode_mlp(p, m, propagate_bounds(m, -np.ones(3), np.ones(3)), ins)
        assert len(enc.binaries) == 75 and p.n_binaries == 75

    def test_dead_neuron(self):
        m = MlpModel([np.array([[1.0], [1.0]]), np.array([[1.0, 1.0]])], [np.array([-5.0, 0.0]), np.zeros(1)])
        nb = propagate_bounds(m, [-1], [1])
        p = MilpProblem()
        u = p.add_var("u", -1, 1)
        enc = encode_mlp(p, m, nb, [u])
        dead = p.variables[enc.binaries[0]]
        assert dead.lb == dead.ub == 0
        assert enc.hidden[0][0] == ({}, 0.0)

    def test_missing_bounds(self):
        p = MilpProblem()
        with pytest.raises(ValueError):
            encode_mlp(p, random_net([1, 2, 1], 0), None, [p.add_var("u", 0, 1)])

    def test_fixed_inputs_2_4_1(self):
        m = random_net([2, 4, 1], seed=7)
        nb = propagate_bounds(m, [-2, -2], [2, 2])
        rng = np.random.default_rng(8)
        for _ in range(50):
            u = rng.uniform(-2, 2, 2)
            y, _, _ = _fixed_input_output(m, nb, u)
            assert abs(y[0] - forward(m, u)[0]) <= 1e-6

    @given(st.integers(0, 10**6))
    @settings(max_examples=100, deadline=None)
    def test_exactness_random_pairs(self, seed):
        rng = np.random.default_rng(seed)
        depth = rng.integers(1, 4)
        sizes = [int(rng.integers(1, 5))] + [int(rng.integers(2, 7)) for _ in range(depth)] + [int(rng.integers(1, 3))]
        m = random_net(sizes, seed)
        m.x_mean = rng.normal(size=sizes[0])
        m.x_scale = rng.uniform(0.5, 2.0, sizes[0])
        lo = rng.uniform(-2, 0, sizes[0])
        hi = lo + rng.uniform(0.1, 3, sizes[0])
        u = rng.uniform(lo, hi)
        y, p, _ = _fixed_input_output(m, propagate_bounds(m, lo, hi), u)
        np.testing.assert_allclose(y, forward(m, u), atol=1e-6, rtol=0)

    def test_minimize_over_box_vs_grid(self):
        m = random_net([2, 4, 1], seed=21)
        nb = propagate_bounds(m, [-1, -1], [1, 1])
        p = MilpProblem()
        ins = [p.add_var(f"u{i}", -1, 1) for i in range(2)]
        enc = encode_mlp(p, m, nb, ins, output_vars=True)
        p.set_objective({enc.output_vars[0]: 1.0})
        sol = solve_milp(p)
        g = np.linspace(-1, 1, 1601)
        G = np.array(np.meshgrid(g, g)).reshape(2, -1).T
        grid_min = forward(m, G).min()
        assert sol.objective <= grid_min + 1e-9
        assert abs(sol.objective - grid_min) <= 1e-4
        u = sol.x[ins]
        assert forward(m, u)[0] == pytest.approx(sol.objective, abs=1e-6)

    def test_bounds_shape_checked(self):
        m = random_net([2, 3, 1], 0)
        bad = NeuronBounds([(np.zeros(2), np.ones(2))], (np.zeros(1), np.ones(1)))
        p = MilpProblem()
        with pytest.raises(ValueError):
            encode_mlp(p, m, bad, [p.add_var("a", 0, 1), p.add_var("b", 0, 1)])


# -- text format --------------------------------------------------------------

class TestLpFormat:
    def test_roundtrip(self, tmp_path):
        p, _ = random_mixed_problem(1, 5)
        free = p.add_var("w", -math.inf, math.inf)
        p.add_constraint({free: -0.1, 0: 1e-3}, "=", -2.5, "named_row")
        p.set_objective({**p.objective, free: 0.25}, constant=-1.5)
        p.write_lp(tmp_path / "p.lp")
        back = read_lp((tmp_path / "p.lp").read_text())
        assert back.to_lp() == p.to_lp()
        assert [v.kind for v in back.variables] == [v.kind for v in p.variables]
        assert solve_milp(back).objective == pytest.approx(solve_milp(p).objective, abs=1e-12)

    def test_format_sections(self):
        p = MilpProblem("demo")
        x = p.add_var("x", 0, 1, BINARY)
        y = p.add_var("y", -math.inf, 3)
        p.add_constraint({x: 1, y: -2}, "<=", 4)
        p.set_objective({x: 2})
        text = p.to_lp()
        for section in ("Minimize", "Subject To", "Bounds", "Binaries", "End"):
            assert f"\n{section}\n" in text or text.endswith(f"{section}\n")
        assert " c0: 1.0 x - 2.0 y <= 4.0" in text
        assert " -inf <= y <= 3.0" in text

    def test_validation(self):
        p = MilpProblem()
        with pytest.raises(ValueError):
            p.add_var("bad name")
        with pytest.raises(ValueError):
            p.add_var("z", 0, 2, BINARY)
        p.add_var("x")
        with pytest.raises(ValueError):
            p.add_constraint({3: 1.0}, "<=", 1)
        with pytest.raises(ValueError):
            p.add_constraint({0: 1.0}, "<", 1)
