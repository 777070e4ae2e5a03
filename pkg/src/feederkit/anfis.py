"""First-order Sugeno ANFIS with two inputs and hybrid learning.

Layers: generalized-bell fuzzification, product firing, normalization,
linear consequents ``p*x + q*y + r``, summation.  Hybrid training solves the
consequents by linear least squares with the premises fixed, then takes one
batch gradient-descent step on the premise parameters (a, b, c).

:class:`AnfisRegressor` wraps the same machinery as a scikit-learn estimator.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import TrainingError

__all__ = [
    "MembershipFunction",
    "AnfisModel",
    "TrainingReport",
    "bell",
    "init_model",
    "firing_strengths",
    "infer",
    "predict",
    "fit_consequents",
    "premise_gradient",
    "numeric_premise_gradient",
    "train_hybrid",
    "gradient_check",
    "fit_vdc_estimator",
    "AnfisRegressor",
]


@dataclass(frozen=True)
class MembershipFunction:
    """Generalized bell ``1 / (1 + |(x - c) / a| ** (2 b))``."""

    a: float
    b: float
    c: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("bell width a and slope b must be positive")

    def __call__(self, x):
        return bell(np.asarray(x, dtype=float), self.a, self.b, self.c)


def bell(x, a, b, c):
    return 1.0 / (1.0 + np.abs((x - c) / a) ** (2.0 * b))


def _bell_and_grads(x, a, b, c):
    """mu and d(mu)/d(a, b, c), broadcasting over x."""
    t = (x - c) / a
    abs_t = np.abs(t)
    mu = 1.0 / (1.0 + abs_t ** (2.0 * b))
    k = mu * (1.0 - mu)
    nz = abs_t > 0
    safe_dx = np.where(nz, x - c, 1.0)
    safe_log = np.log(np.where(nz, abs_t, 1.0))
    d_a = k * 2.0 * b / a
    d_b = np.where(nz, -k * 2.0 * safe_log, 0.0)
    d_c = np.where(nz, k * 2.0 * b / safe_dx, 0.0)
    return mu, d_a, d_b, d_c


@dataclass
class AnfisModel:
    """Parameters of a two-input first-order Sugeno system.

    ``premise`` has shape (2, n_mf, 3) holding (a, b, c) per input and
    membership function; ``consequents`` has shape (n_rules, 3) holding
    (p, q, r).  ``rules`` lists the membership index used for each input.
    Inputs are mapped through ``(raw - offset) / scale`` before fuzzification.
    """

    premise: np.ndarray
    consequents: np.ndarray
    rules: tuple[tuple[int, int], ...]
    wiring: str = "grid"
    offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    scale: np.ndarray = field(default_factory=lambda: np.ones(2))

    @property
    def n_mf(self) -> int:
        return self.premise.shape[1]

    @property
    def n_rules(self) -> int:
        return len(self.rules)

    def membership(self, inp: int, j: int) -> MembershipFunction:
        a, b, c = self.premise[inp, j]
        return MembershipFunction(float(a), float(b), float(c))

    def copy(self) -> "AnfisModel":
        return AnfisModel(
            self.premise.copy(), self.consequents.copy(), self.rules, self.wiring, self.offset.copy(), self.scale.copy()
        )

    def to_dict(self) -> dict:
        return {
            "wiring": self.wiring,
            "rules": [list(r) for r in self.rules],
            "premise": self.premise.tolist(),
            "consequents": self.consequents.tolist(),
            "offset": self.offset.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnfisModel":
        return cls(
            np.asarray(d["premise"], dtype=float),
            np.asarray(d["consequents"], dtype=float),
            tuple(tuple(r) for r in d["rules"]),
            d.get("wiring", "grid"),
            np.asarray(d.get("offset", [0.0, 0.0]), dtype=float),
            np.asarray(d.get("scale", [1.0, 1.0]), dtype=float),
        )


def _rules(n_mf: int, wiring: str) -> tuple[tuple[int, int], ...]:
    if wiring == "grid":
        return tuple(itertools.product(range(n_mf), repeat=2))
    if wiring == "paired":
        return tuple((j, j) for j in range(n_mf))
    raise ValueError(f"unknown rule wiring {wiring!r}")


def init_model(x_range=(-1.0, 1.0), y_range=(-1.0, 1.0), n_mf: int = 2, wiring: str = "grid") -> AnfisModel:
    """Equally spaced bells over each input range, a = half spacing, b = 2."""
    if n_mf < 1:
        raise ValueError("n_mf must be at least 1")
    premise = np.empty((2, n_mf, 3))
    for inp, (lo, hi) in enumerate((x_range, y_range)):
        if n_mf == 1:
            centers, width = np.array([(lo + hi) / 2.0]), max(hi - lo, 1e-12) / 2.0
        else:
            centers = np.linspace(lo, hi, n_mf)
            width = (centers[1] - centers[0]) / 2.0
        premise[inp, :, 0] = width
        premise[inp, :, 1] = 2.0
        premise[inp, :, 2] = centers
    rules = _rules(n_mf, wiring)
    return AnfisModel(premise, np.zeros((len(rules), 3)), rules, wiring)


def _inputs(model: AnfisModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return (X - model.offset) / model.scale


def _memberships(model: AnfisModel, Xn):
    """mu[inp] of shape (N, n_mf) plus gradients of the same shape."""
    out = []
    for inp in range(2):
        p = model.premise[inp]
        out.append(_bell_and_grads(Xn[:, inp : inp + 1], p[:, 0], p[:, 1], p[:, 2]))
    return out


def firing_strengths(model: AnfisModel, X, normalized: bool = True) -> np.ndarray:
    """Layer-2 (or, normalized, layer-3) rule weights, shape (N, n_rules)."""
    Xn = _inputs(model, X)
    (mx, *_), (my, *_) = _memberships(model, Xn)
    ia = [r[0] for r in model.rules]
    ib = [r[1] for r in model.rules]
    w = mx[:, ia] * my[:, ib]
    if not normalized:
        return w
    total = w.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise TrainingError("all rule firing strengths are zero", "all-firing-zero")
    return w / total


def _rule_outputs(model: AnfisModel, Xn) -> np.ndarray:
    design = np.column_stack([Xn, np.ones(len(Xn))])
    return design @ model.consequents.T  # (N, n_rules)


def predict(model: AnfisModel, X) -> np.ndarray:
    Xn = _inputs(model, X)
    wbar = firing_strengths(model, X)
    return np.sum(wbar * _rule_outputs(model, Xn), axis=1)


def infer(model: AnfisModel, x: float, y: float) -> float:
    """Crisp output for a single input pair."""
    return float(predict(model, [[x, y]])[0])


def _rmse(model, X, t) -> float:
    return float(np.sqrt(np.mean((predict(model, X) - t) ** 2)))


def fit_consequents(model: AnfisModel, X, t) -> int:
    """Least-squares consequents with premises held fixed; returns the rank."""
    Xn = _inputs(model, X)
    wbar = firing_strengths(model, X)
    design = np.column_stack([Xn, np.ones(len(Xn))])
    A = (wbar[:, :, None] * design[:, None, :]).reshape(len(Xn), -1)
    coef, _, rank, _ = scipy.linalg.lstsq(A, t, cond=1e-10, lapack_driver="gelsy")
    if rank < A.shape[1]:
        raise TrainingError(
            f"consequent least squares is rank deficient: rank {rank} of {A.shape[1]}", "singular-lse"
        )
    model.consequents = coef.reshape(model.n_rules, 3)
    return int(rank)


def premise_gradient(model: AnfisModel, X, t) -> np.ndarray:
    """Gradient of 0.5 * sum of squared errors w.r.t. the premise array."""
    Xn = _inputs(model, X)
    (mx, *gx), (my, *gy) = _memberships(model, Xn)
    ia = np.array([r[0] for r in model.rules])
    ib = np.array([r[1] for r in model.rules])
    w = mx[:, ia] * my[:, ib]
    total = w.sum(axis=1, keepdims=True)
    f = _rule_outputs(model, Xn)
    y = np.sum(w * f, axis=1, keepdims=True) / total
    err = y - np.asarray(t, dtype=float)[:, None]
    dE_dw = err * (f - y) / total  # (N, R)
    grad = np.zeros_like(model.premise)
    for j in range(model.n_mf):
        sel_a = ia == j
        dmu_x = np.sum(dE_dw[:, sel_a] * my[:, ib[sel_a]], axis=1)
        sel_b = ib == j
        dmu_y = np.sum(dE_dw[:, sel_b] * mx[:, ia[sel_b]], axis=1)
        for k in range(3):
            grad[0, j, k] = np.sum(dmu_x * gx[k][:, j])
            grad[1, j, k] = np.sum(dmu_y * gy[k][:, j])
    return grad


def numeric_premise_gradient(model: AnfisModel, X, t, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(model.premise)
    probe = model.copy()
    for idx in np.ndindex(*model.premise.shape):
        base = model.premise[idx]
        h = step * max(1.0, abs(base))
        probe.premise[idx] = base + h
        y_up = predict(probe, X)
        probe.premise[idx] = base - h
        y_down = predict(probe, X)
        probe.premise[idx] = base
        # 0.5*(e_up^2 - e_down^2) factored to avoid cancelling two large sums
        grad[idx] = 0.5 * np.sum((y_up - y_down) * (y_up + y_down - 2 * t)) / (2 * h)
    return grad


def gradient_check(model: AnfisModel, X, t, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference premise gradients."""
    if not 1e-8 < step < 1e-2:
        raise ValueError("step must lie in (1e-8, 1e-2)")
    t = np.asarray(t, dtype=float)
    g = premise_gradient(model, X, t)
    g_fd = numeric_premise_gradient(model, X, t, step)
    return float(np.max(np.abs(g - g_fd) / (np.abs(g_fd) + 1e-12)))


@dataclass
class TrainingReport:
    rmse: list[float]  # rmse[0] is before training, then one entry per epoch (after LSE)
    rmse_before_lse: list[float]
    premise: np.ndarray
    consequents: np.ndarray
    converged: bool
    epochs_run: int


def train_hybrid(
    model: AnfisModel, X, t, epochs: int = 50, learn_rate: float = 0.01, tol: float = 1e-10
) -> TrainingReport:
    """Hybrid LSE + gradient-descent training, mutating ``model`` in place."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(t, dtype=float)
    if X.shape[0] != t.shape[0] or X.shape[1] != 2:
        raise ValueError("X must be (N, 2) and t must have N rows")
    if X.shape[0] < 3 * model.n_rules:
        raise TrainingError(
            f"{X.shape[0]} rows cannot determine {3 * model.n_rules} consequent parameters", "singular-lse"
        )
    if learn_rate < 0:
        raise ValueError("learn_rate must be non-negative")
    rmse = [_rmse(model, X, t)]
    before = []
    converged = False
    epoch = 0
    for epoch in range(1, epochs + 1):
        before.append(_rmse(model, X, t))
        fit_consequents(model, X, t)
        rmse.append(_rmse(model, X, t))
        if rmse[-1] <= tol:
            converged = True
            break
        if learn_rate > 0:
            g = premise_gradient(model, X, t)
            if not np.all(np.isfinite(g)):
                raise TrainingError("premise gradient is not finite", "nan-gradient")
            model.premise -= learn_rate * g
            model.premise[:, :, 0] = np.maximum(model.premise[:, :, 0], 1e-6)
            model.premise[:, :, 1] = np.maximum(model.premise[:, :, 1], 1e-3)
    else:
        converged = len(rmse) > 1 and abs(rmse[-1] - rmse[-2]) <= tol
    return TrainingReport(rmse, before, model.premise.copy(), model.consequents.copy(), converged, epoch if epochs else 0)


def _normalization(X) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = X.min(axis=0), X.max(axis=0)
    spread = hi - lo
    if np.any(spread <= 0):
        bad = int(np.flatnonzero(spread <= 0)[0])
        raise TrainingError(f"input {bad} has zero spread", "degenerate-trace-range")
    return (hi + lo) / 2.0, spread / 2.0


def fit_vdc_estimator(
    traces, n_mf: int = 2, epochs: int = 50, learn_rate: float = 0.01, wiring: str = "grid"
) -> AnfisModel:
    """Train a DC-link reference estimator from (load-power error, dc-voltage error, target) rows.

    Inputs are scaled to [-1, 1]; the scaling is stored on the returned model.
    """
    traces = np.asarray(traces, dtype=float)
    if traces.ndim != 2 or traces.shape[0] == 0 or traces.shape[1] != 3:
        raise ValueError("traces must be a non-empty (N, 3) array")
    X, t = traces[:, :2], traces[:, 2]
    offset, scale = _normalization(X)
    model = init_model(n_mf=n_mf, wiring=wiring)
    model.offset, model.scale = offset, scale
    train_hybrid(model, X, t, epochs=epochs, learn_rate=learn_rate)
    return model


class AnfisRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn regressor over two features.

    Parameters
    ----------
    n_mf : int
        Bell membership functions per input.
    wiring : {"grid", "paired"}
        Grid partition (n_mf**2 rules) or one rule per membership index.
    epochs, learn_rate : hybrid training settings.
    normalize : bool
        Scale both inputs to [-1, 1] before fuzzification.
    """

    def __init__(self, n_mf=2, wiring="grid", epochs=50, learn_rate=0.01, normalize=True):
        self.n_mf = n_mf
        self.wiring = wiring
        self.epochs = epochs
        self.learn_rate = learn_rate
        self.normalize = normalize

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if X.shape[1] != 2:
            raise ValueError(f"AnfisRegressor takes exactly 2 features, got {X.shape[1]}")
        if self.normalize:
            offset, scale = _normalization(X)
            model = init_model(n_mf=self.n_mf, wiring=self.wiring)
            model.offset, model.scale = offset, scale
        else:
            lo, hi = X.min(axis=0), X.max(axis=0)
            model = init_model((lo[0], hi[0]), (lo[1], hi[1]), self.n_mf, self.wiring)
        self.report_ = train_hybrid(model, X, y, epochs=self.epochs, learn_rate=self.learn_rate)
        self.model_ = model
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != 2:
            raise ValueError(f"expected 2 features, got {X.shape[1]}")
        return predict(self.model_, X)
