"""Gradient-boosted tree simulator, data augmentation and calibration.

The simulator maps ``(x, omega)`` to the maximum violation ``h``. Trees are
grown level by level with exact greedy variance-reduction splits; ties go
to the lowest feature index and then the lowest threshold.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .uncertainty import STREAM_AUGMENT, Dataset, substream

SCHEMA = "jccs.gbt/1"


@dataclass
class GbtParams:
    n_trees: int = 200
    max_depth: int = 6
    learning_rate: float = 0.1
    min_samples_leaf: int = 5
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 0 or self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ValueError("tree counts must be non-negative and leaves non-empty")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout fraction must lie in [0, 1)")


@dataclass
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf. Samples with
    ``x[feature] <= threshold`` go left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __post_init__(self) -> None:
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=float)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=float)
        n = len(self.feature)
        if n == 0 or not all(len(a) == n for a in (self.threshold, self.left, self.right, self.value)):
            raise ValueError("tree arrays must be non-empty and equally long")
        internal = self.feature >= 0
        kids = np.concatenate([self.left[internal], self.right[internal]])
        # children always come after their parent, so every path ends at a leaf
        parents = np.concatenate([np.flatnonzero(internal)] * 2)
        if np.any(kids <= parents) or np.any(kids >= n):
            raise ValueError("malformed tree links")
        if not np.all(np.isfinite(self.value[~internal])):
            raise ValueError("leaf values must be finite")

    @property
    def depth(self) -> int:
        d = np.zeros(len(self.feature), dtype=int)
        for i in np.flatnonzero(self.feature >= 0):
            d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf value reached by each row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        for _ in range(self.depth):
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                break
            go_left = X[rows, np.where(inner, f, 0)] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)
        return self.value[node]

    def to_rows(self) -> list[list]:
        return [[int(f), float(t), int(l), int(r), float(v)]
                for f, t, l, r, v in zip(self.feature, self.threshold, self.left, self.right, self.value)]

    @classmethod
    def from_rows(cls, rows) -> Tree:
        f, t, l, r, v = zip(*rows)
        return cls(np.array(f), np.array(t), np.array(l), np.array(r), np.array(v))


@dataclass
class GbtModel:
    base: float
    learning_rate: float
    n_features: int
    trees: list[Tree] = field(default_factory=list)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.zeros(len(X))
        for t in self.trees:
            out += t.apply(X)
        return self.base + self.learning_rate * out

    def predict_records(self, x, lam, omega) -> np.ndarray:
        return self.predict(simulator_features(x, lam, omega))

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "base": self.base,
            "learning_rate": self.learning_rate,
            "n_features": self.n_features,
            "trees": [t.to_rows() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> GbtModel:
        if d.get("schema") != SCHEMA:
            raise ValueError(f"not a {SCHEMA} document")
        return cls(float(d["base"]), float(d["learning_rate"]), int(d["n_features"]),
                   [Tree.from_rows(rows) for rows in d["trees"]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> GbtModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def simulator_features(x, lam, omega) -> np.ndarray:
    """Simulator input: features ``x`` and uncertainty ``omega``, plus the
    utilization ``lam`` and realized utilization ``lam * (1 + omega)``.

    ``lam`` is a linear function of ``x`` and adds no information; both
    extra columns are spelled out because axis-aligned splits cannot form
    linear combinations or products.
    """
    x, lam, omega = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (x, lam, omega))
    return np.hstack([x, omega, lam, lam * (1.0 + omega)])


def _dense_rank(Xt: np.ndarray, order: np.ndarray) -> np.ndarray:
    srt = np.take_along_axis(Xt, order, axis=1)
    r = np.zeros(order.shape, dtype=np.int32)
    r[:, 1:] = np.cumsum(srt[:, 1:] != srt[:, :-1], axis=1)
    rank = np.empty_like(r)
    np.put_along_axis(rank, order, r, axis=1)
    return rank


def _grow_tree(X, order, rank, g, max_depth, min_leaf):
    """Fit one regression tree to residuals ``g``.

    ``order`` holds the per-feature ascending sort of the rows and ``rank``
    the dense rank of every value (both shaped features x rows).
    """
    n_feat, n = order.shape
    node_of = np.zeros(n, dtype=np.int64)
    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [float(g.mean())]
    frontier = [0]
    min_gain = 1e-12 * float(g @ g)
    for _ in range(max_depth):
        if not frontier:
            break
        k = len(frontier)
        local = np.full(len(feature), -1, dtype=np.int16 if k < 2**15 else np.int64)
        local[frontier] = np.arange(k)
        loc = local[node_of]
        counts = np.bincount(loc[loc >= 0], minlength=k)
        starts = np.concatenate([[0], np.cumsum(counts)])
        m = int(starts[-1])
        # rows of each active node, ascending in every feature
        keyed = loc[order]
        rows = order
        if m < n:
            sel = keyed >= 0
            keyed = keyed[sel].reshape(n_feat, m)
            rows = order[sel].reshape(n_feat, m)
        perm = np.argsort(keyed, axis=1, kind="stable")
        rows = np.take(rows, perm + (np.arange(n_feat) * m)[:, None])
        rk = np.take(rank, rows + (np.arange(n_feat) * n)[:, None])
        gs = g[rows]
        csum = np.cumsum(gs, axis=1)
        seg = np.repeat(np.arange(k), counts)
        before = np.hstack([np.zeros((n_feat, 1)), csum[:, starts[1:-1] - 1]])
        s_left = csum - before[:, seg]
        s_node = (csum[:, starts[1:] - 1] - before)[:, seg]
        n_left = (np.arange(m) - starts[:-1][seg] + 1).astype(float)
        n_right = counts[seg] - n_left
        inv_r = np.where(n_right > 0, 1.0 / np.maximum(n_right, 1.0), 0.0)
        ok = np.zeros((n_feat, m), dtype=bool)
        ok[:, :-1] = rk[:, :-1] < rk[:, 1:]
        ok &= (n_left >= min_leaf) & (n_right >= min_leaf)
        # per-node constant s_node^2 / n_node is subtracted after the argmax
        score = np.where(ok, s_left**2 / n_left + (s_node - s_left) ** 2 * inv_r, -np.inf)
        new_frontier = []
        for j, nid in enumerate(frontier):
            a, b = starts[j], starts[j + 1]
            if b - a < 2 * min_leaf:
                continue
            block = score[:, a:b]
            f, p = divmod(int(np.argmax(block)), b - a)
            gain = block[f, p] - s_node[f, a] ** 2 / (b - a)
            if not gain > min_gain:
                continue
            lo, hi = X[rows[f, a + p], f], X[rows[f, a + p + 1], f]
            thr = lo + (hi - lo) / 2
            if not lo <= thr < hi:
                thr = lo
            li, ri = len(feature), len(feature) + 1
            feature[nid], threshold[nid], left[nid], right[nid] = f, float(thr), li, ri
            for gg in (gs[f, a : a + p + 1], gs[f, a + p + 1 : b]):
                feature.append(-1); threshold.append(0.0); left.append(-1); right.append(-1)
                value.append(float(gg.mean()))
            node_of[rows[f, a : a + p + 1]] = li
            node_of[rows[f, a + p + 1 : b]] = ri
            new_frontier += [li, ri]
        frontier = new_frontier
    value = np.array(value)
    value[np.array(feature) >= 0] = 0.0
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right), value)


def fit_gbt(X: np.ndarray, y: np.ndarray, params: GbtParams | None = None) -> GbtModel:
    """Squared-error gradient boosting on a feature matrix."""
    params = params or GbtParams()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) == 0 or len(y) != len(X):
        raise ValueError("need a non-empty feature matrix with one target per row")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("features and targets must be finite")
    if np.ptp(y) == 0:
        return GbtModel(float(y[0]), params.learning_rate, X.shape[1])
    model = GbtModel(float(y.mean()), params.learning_rate, X.shape[1])
    order = np.argsort(X.T, axis=1, kind="stable")
    rank = _dense_rank(X.T, order)
    pred = np.full(len(y), model.base)
    for _ in range(params.n_trees):
        tree = _grow_tree(X, order, rank, y - pred, params.max_depth, params.min_samples_leaf)
        if tree.feature[0] < 0:
            break
        model.trees.append(tree)
        pred += params.learning_rate * tree.apply(X)
    return model


@dataclass
class SimulatorReport:
    holdout_rmse: float
    baseline_rmse: float
    n_train: int
    n_holdout: int
    n_trees: int


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def train_simulator(historical: Dataset, params: GbtParams | None = None):
    """Fit the simulator on ``(x, omega) -> h``.

    A held-out split measures generalization against the constant
    predictor; the returned model is then refit on every record, since
    calibration is computed on the full historical set.
    Returns ``(model, report)``.
    """
    params = params or GbtParams()
    if len(historical) == 0:
        raise ValueError("historical dataset is empty")
    X = simulator_features(historical.x, historical.lam, historical.omega)
    y = historical.h
    n = len(y)
    n_hold = int(round(params.holdout_fraction * n))
    if n_hold >= 1 and n - n_hold >= 1:
        perm = np.random.Generator(np.random.Philox(key=[params.seed, 0x6762])).permutation(n)
        hold, fit_idx = perm[:n_hold], perm[n_hold:]
        trial = fit_gbt(X[fit_idx], y[fit_idx], params)
        rmse = _rmse(trial.predict(X[hold]), y[hold])
        base = _rmse(np.full(n_hold, y[fit_idx].mean()), y[hold])
    else:
        rmse = base = float("nan")
    model = fit_gbt(X, y, params)
    return model, SimulatorReport(rmse, base, n - n_hold, n_hold, len(model.trees))


def augment(sim: GbtModel, historical: Dataset, K: int, n_omega: int, seed: int = 0) -> Dataset:
    """Pair ``K`` historical operating points with ``n_omega`` historical
    uncertainty draws each and label them with the simulator.

    Operating points are drawn without replacement when ``K`` does not
    exceed the pool; uncertainty draws are taken with replacement, each
    ``k`` from its own substream.
    """
    if K <= 0 or n_omega <= 0:
        raise ValueError("K and n_omega must be positive")
    n = len(historical)
    if n == 0:
        raise ValueError("historical dataset is empty")
    pick = np.random.Generator(np.random.Philox(key=[seed, STREAM_AUGMENT << 40]))
    xi = pick.permutation(n)[:K] if K <= n else pick.integers(0, n, K)
    wi = np.concatenate([substream(seed, STREAM_AUGMENT, k + 1).integers(0, n, n_omega) for k in range(K)])
    xi = np.repeat(xi, n_omega)
    x, lam, omega = historical.x[xi], historical.lam[xi], historical.omega[wi]
    h_hat = sim.predict_records(x, lam, omega)
    return Dataset(x=x, lam=lam, omega=omega, h=h_hat, p_loss=None, provenance="augmented",
                   bus_ids=list(historical.bus_ids), dg_buses=list(historical.dg_buses))


@dataclass
class CalibrationResult:
    rho: float
    worst_index: int
    residual_min: float
    residual_mean: float
    residual_max: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.rho) and self.rho >= 0):
            raise ValueError("rho must be finite and non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> CalibrationResult:
        return cls(**json.loads(Path(path).read_text()))


def calibrate_values(h, h_hat) -> CalibrationResult:
    """Smallest non-negative shift with ``h_hat + rho >= h`` in floating point."""
    h = np.asarray(h, dtype=float)
    h_hat = np.asarray(h_hat, dtype=float)
    if h.size == 0 or h.shape != h_hat.shape:
        raise ValueError("need matching, non-empty residual arrays")
    res = h - h_hat
    worst = int(np.argmax(res))
    rho = max(0.0, float(res[worst]))
    # h_hat + (h - h_hat) can round below h; step up until the cover is exact
    while np.any(h_hat + rho < h):
        rho = float(np.nextafter(rho, np.inf))
    return CalibrationResult(rho, worst, float(res.min()), float(res.mean()), float(res.max()))


def calibrate(sim: GbtModel, historical: Dataset) -> CalibrationResult:
    if len(historical) == 0:
        raise ValueError("historical dataset is empty")
    return calibrate_values(historical.h, sim.predict_records(historical.x, historical.lam, historical.omega))
