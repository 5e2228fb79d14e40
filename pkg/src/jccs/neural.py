"""Small ReLU multilayer perceptrons trained with pinball or squared loss.

Models store the input standardization and the output scaling used during
training; :meth:`MlpModel.folded_layers` returns the equivalent plain affine
layers so that downstream encoders see a standard ReLU network.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SCHEMA = "jccs.mlp/1"


class TrainingError(RuntimeError):
    pass


@dataclass
class MlpModel:
    weights: list[np.ndarray]  # W^l with shape (out, in)
    biases: list[np.ndarray]
    role: str = "loss"
    epsilons: tuple[float, ...] = ()
    x_mean: np.ndarray | None = None
    x_scale: np.ndarray | None = None
    y_mean: float = 0.0
    y_scale: float = 1.0
    history: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.weights = [np.asarray(W, dtype=float).reshape(np.shape(W)) for W in self.weights]
        self.biases = [np.asarray(b, dtype=float).reshape(-1) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k}: weight/bias shapes disagree")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k}: input width does not chain")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameters")
        if self.role == "quantile":
            if len(self.epsilons) != self.output_dim:
                raise ValueError("quantile models need one output per risk level")
            if any(not 0 < e < 1 for e in self.epsilons):
                raise ValueError("risk levels must lie in (0, 1)")
            self.epsilons = tuple(float(e) for e in self.epsilons)
        elif self.role == "loss":
            if self.output_dim != 1:
                raise ValueError("loss models have a single output")
        else:
            raise ValueError(f"unknown role {self.role!r}")
        d = self.input_dim
        self.x_mean = np.zeros(d) if self.x_mean is None else np.asarray(self.x_mean, dtype=float)
        self.x_scale = np.ones(d) if self.x_scale is None else np.asarray(self.x_scale, dtype=float)
        if not self.y_scale > 0 or np.any(self.x_scale <= 0):
            raise ValueError("scales must be positive")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(W.shape[0] for W in self.weights[:-1])

    @property
    def n_hidden(self) -> int:
        return sum(self.hidden_widths)

    def head(self, eps: float) -> int:
        """Output index of risk level ``eps``."""
        for k, e in enumerate(self.epsilons):
            if math.isclose(e, eps, rel_tol=0, abs_tol=1e-12):
                return k
        raise ValueError(f"risk level {eps} is not among the model heads {self.epsilons}")

    def folded_layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Affine layers with the input and output scaling absorbed."""
        Ws = [W.copy() for W in self.weights]
        bs = [b.copy() for b in self.biases]
        inv = 1.0 / self.x_scale
        bs[0] = bs[0] - Ws[0] @ (self.x_mean * inv)
        Ws[0] = Ws[0] * inv
        Ws[-1] = Ws[-1] * self.y_scale
        bs[-1] = bs[-1] * self.y_scale + self.y_mean
        return list(zip(Ws, bs))

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "role": self.role,
            "epsilons": list(self.epsilons),
            "hidden": list(self.hidden_widths),
            "input_dim": self.input_dim,
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MlpModel:
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported model schema {d.get('schema')!r}")
        d_in = int(d["input_dim"])
        Ws = [np.asarray(L["W"], dtype=float).reshape(len(L["b"]), -1) for L in d["layers"]]
        if Ws[0].size == 0:
            Ws[0] = Ws[0].reshape(len(d["layers"][0]["b"]), d_in)
        return cls(
            weights=Ws,
            biases=[np.asarray(L["b"], dtype=float) for L in d["layers"]],
            role=d["role"],
            epsilons=tuple(d["epsilons"]),
            x_mean=np.asarray(d["x_mean"], dtype=float),
            x_scale=np.asarray(d["x_scale"], dtype=float),
            y_mean=float(d["y_mean"]),
            y_scale=float(d["y_scale"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> MlpModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Network output for one input vector or a batch of row vectors."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.input_dim:
        raise ValueError(f"expected {model.input_dim} features, got {X.shape[1]}")
    s = (X - model.x_mean) / model.x_scale
    for W, b in zip(model.weights[:-1], model.biases[:-1]):
        s = np.maximum(s @ W.T + b, 0.0)
    out = (s @ model.weights[-1].T + model.biases[-1]) * model.y_scale + model.y_mean
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("network output is not finite")
    return out[0] if single else out


# -- losses ------------------------------------------------------------------

def pinball_loss(h, q_hat, eps: float):
    """Quantile loss ``mu * (1 - eps - 1[mu <= 0])`` with ``mu = h - q_hat``."""
    if not 0 < eps < 1:
        raise ValueError("risk level must lie in (0, 1)")
    mu = np.asarray(h, dtype=float) - np.asarray(q_hat, dtype=float)
    out = mu * (1.0 - eps - (mu <= 0))
    return float(out) if np.ndim(out) == 0 else out


def _pinball_grad(mu: np.ndarray, eps: np.ndarray) -> np.ndarray:
    # derivative with respect to the prediction; kink resolved on the mu <= 0 side
    return -(1.0 - eps - (mu <= 0))


def empirical_quantile(samples, eps: float) -> float:
    """Smallest sample ``y`` with at least a ``1 - eps`` fraction of samples ``<= y``."""
    s = np.sort(np.asarray(samples, dtype=float).ravel())
    if s.size == 0:
        raise ValueError("need at least one sample")
    if not 0 < eps < 1:
        raise ValueError("risk level must lie in (0, 1)")
    k = math.ceil((1.0 - eps) * s.size - 1e-9)
    return float(s[max(k, 1) - 1])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    dropout: float = 0.1
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch size and learning rate must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0 < self.validation_fraction <= 0.5:
            raise ValueError("validation fraction must lie in (0, 0.5]")


def _init_layers(rng: np.random.Generator, sizes: Sequence[int]):
    Ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        std = math.sqrt(2.0 / max(fan_in, 1))
        Ws.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return Ws, bs


def _forward_cache(Ws, bs, X, rng=None, dropout=0.0):
    acts, masks = [X], []
    s = X
    for W, b in zip(Ws[:-1], bs[:-1]):
        s = np.maximum(s @ W.T + b, 0.0)
        if rng is not None and dropout > 0:
            m = (rng.random(s.shape) >= dropout) / (1.0 - dropout)
            s = s * m
        else:
            m = None
        masks.append(m)
        acts.append(s)
    return s @ Ws[-1].T + bs[-1], acts, masks


def _backward(Ws, acts, masks, g_out):
    """Parameter gradients given d(loss)/d(output) rows."""
    gW, gb = [None] * len(Ws), [None] * len(Ws)
    g = g_out
    for k in range(len(Ws) - 1, -1, -1):
        gW[k] = g.T @ acts[k]
        gb[k] = g.sum(axis=0)
        if k:
            g = g @ Ws[k]
            if masks[k - 1] is not None:
                g = g * masks[k - 1]
            g = g * (acts[k] > 0)
    return gW, gb


def _role_loss(role: str, eps: np.ndarray, out: np.ndarray, y: np.ndarray):
    """Mean loss and its gradient with respect to the (scaled) outputs."""
    n = out.shape[0]
    if role == "quantile":
        mu = y[:, None] - out
        loss = np.sum(mu * (1.0 - eps - (mu <= 0))) / n
        grad = _pinball_grad(mu, eps) / n
    else:
        diff = out - y[:, None]
        loss = np.sum(diff * diff) / n
        grad = 2.0 * diff / n
    return float(loss), grad


def train(
    x: np.ndarray,
    y: np.ndarray,
    hidden: Sequence[int],
    role: str = "loss",
    cfg: TrainConfig | None = None,
    epsilons: Sequence[float] = (),
) -> MlpModel:
    """Fit an MLP by mini-batch Adam on pinball (quantile) or squared (loss) error.

    ``x`` is ``(n, d)`` and ``y`` the ``n`` noisy labels.  The parameters with
    the lowest validation loss are returned.  For squared error the output
    layer is finally refit by least squares on all samples, which makes the
    affine case exact.
    """
    cfg = cfg or TrainConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise ValueError("need a nonempty (n, d) feature matrix and n labels")
    if role == "quantile" and not epsilons:
        raise ValueError("quantile training needs at least one risk level")
    eps = np.asarray(epsilons if role == "quantile" else (), dtype=float)
    n, d = x.shape
    n_out = len(eps) if role == "quantile" else 1

    x_mean = x.mean(axis=0)
    x_scale = x.std(axis=0)
    x_scale[x_scale < 1e-12] = 1.0
    y_mean = float(y.mean())
    y_scale = float(y.std()) or 1.0
    Xs = (x - x_mean) / x_scale
    ys = (y - y_mean) / y_scale

    rng = np.random.Generator(np.random.Philox(key=[cfg.seed & 0xFFFFFFFFFFFFFFFF, 0x6E6E]))
    perm = rng.permutation(n)
    # tiny samples are validated in-sample rather than split
    n_val = int(round(cfg.validation_fraction * n)) if n >= 100 else 0
    val, tr = perm[:n_val], perm[n_val:]
    if n_val == 0:
        val = tr

    Ws, bs = _init_layers(rng, [d, *hidden, n_out])
    params = Ws + bs
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    step = 0
    best = (math.inf, [p.copy() for p in params], 0)
    train_curve, val_curve = [], []
    L = len(Ws)
    for epoch in range(cfg.epochs):
        order = tr[rng.permutation(len(tr))]
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            out, acts, masks = _forward_cache(Ws, bs, Xs[idx], rng, cfg.dropout)
            loss, g_out = _role_loss(role, eps, out, ys[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch}, step {step}")
            total += loss * len(idx)
            gW, gb = _backward(Ws, acts, masks, g_out)
            step += 1
            c1 = 1.0 - beta1**step
            c2 = 1.0 - beta2**step
            for k, g in enumerate(gW + gb):
                m1[k] *= beta1
                m1[k] += (1 - beta1) * g
                m2[k] *= beta2
                m2[k] += (1 - beta2) * g * g
                params[k] -= cfg.learning_rate * (m1[k] / c1) / (np.sqrt(m2[k] / c2) + adam_eps)
        out, _, _ = _forward_cache(Ws, bs, Xs[val])
        vloss, _ = _role_loss(role, eps, out, ys[val])
        if not math.isfinite(vloss):
            raise TrainingError(f"validation loss became {vloss} at epoch {epoch}")
        train_curve.append(total / len(tr))
        val_curve.append(vloss)
        if vloss < best[0]:
            best = (vloss, [p.copy() for p in params], epoch)

    params = best[1]
    Ws, bs = params[:L], params[L:]
    if role == "loss":
        # exact least-squares refit of the output layer on every sample
        _, acts, _ = _forward_cache(Ws, bs, Xs)
        F = np.hstack([acts[-1], np.ones((n, 1))])
        coef, *_ = np.linalg.lstsq(F, ys, rcond=None)
        Ws[-1] = coef[:-1][None, :]
        bs[-1] = coef[-1:].copy()

    model = MlpModel(
        weights=Ws, biases=bs, role=role,
        epsilons=tuple(float(e) for e in eps),
        x_mean=x_mean, x_scale=x_scale, y_mean=y_mean, y_scale=y_scale,
    )
    model.history = {
        "train_loss": train_curve,
        "val_loss": val_curve,
        "best_epoch": best[2],
        "best_val_loss": best[0] * (y_scale if role == "quantile" else y_scale**2),
    }
    return model


def train_dataset(ds, hidden: Sequence[int], role: str, cfg: TrainConfig | None = None,
                  epsilons: Sequence[float] = ()) -> MlpModel:
    """Train on a :class:`~jccs.uncertainty.Dataset` (``h`` or ``p_loss`` labels)."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if role == "loss":
        if ds.p_loss is None:
            raise ValueError("loss training needs a dataset with p_loss")
        return train(ds.x, ds.p_loss, hidden, "loss", cfg)
    return train(ds.x, ds.h, hidden, "quantile", cfg, epsilons)


def mean_role_loss(model: MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    """Mean training-objective value of ``model`` on unscaled data."""
    out = np.atleast_2d(forward(model, x))
    if out.shape[0] != len(y):
        out = out.T
    eps = np.asarray(model.epsilons)
    loss, _ = _role_loss(model.role, eps, out, np.asarray(y, dtype=float))
    return loss


def loss_and_grad(model: MlpModel, x: np.ndarray, h: np.ndarray):
    """Mean role loss on unscaled labels and its gradient for every parameter."""
    Ws, bs = model.weights, model.biases
    X = (np.atleast_2d(x) - model.x_mean) / model.x_scale
    raw, acts, masks = _forward_cache(Ws, bs, X)
    out = raw * model.y_scale + model.y_mean
    loss, g = _role_loss(model.role, np.asarray(model.epsilons), out, np.atleast_1d(h).astype(float))
    gW, gb = _backward(Ws, acts, masks, g * model.y_scale)
    return loss, gW + gb


def gradient_check(model: MlpModel, x: np.ndarray, h, step: float = 1e-5) -> float:
    """Largest relative gap between backprop gradients and central differences."""
    _, grads = loss_and_grad(model, x, h)
    params = model.weights + model.biases
    worst = 0.0
    for p, g in zip(params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up, _ = loss_and_grad(model, x, h)
            flat[i] = old - step
            down, _ = loss_and_grad(model, x, h)
            flat[i] = old
            num = (up - down) / (2 * step)
            # absolute comparison for gradients near zero
            scale = max(abs(num), abs(gflat[i]), 1e-6)
            worst = max(worst, abs(num - gflat[i]) / scale)
    return worst
