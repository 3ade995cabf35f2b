"""Exact Gaussian process regression with an ARD squared-exponential kernel.

Hyperparameters live in log space as one flat vector::

    [log sigma_f, log l_1, ..., log l_D, log sigma_n]

Training maximizes the log marginal likelihood from several random starts
with L-BFGS-B and keeps the best restart. All linear algebra goes through a
Cholesky factor of ``phi = K_f + (sigma_n**2 + jitter) I``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .errors import AllRestartsFailed, DimensionMismatch, FactorizationFailure, InputError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
JITTER = 1e-10
MAX_JITTER = 1e-4
CI_Z = 1.96
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class Hyperparameters:
    log_sigma_f: float
    log_lengthscale: np.ndarray
    log_sigma_n: float

    def __post_init__(self):
        ell = np.array(self.log_lengthscale, dtype=float).reshape(-1)
        ell.setflags(write=False)
        object.__setattr__(self, "log_lengthscale", ell)
        object.__setattr__(self, "log_sigma_f", float(self.log_sigma_f))
        object.__setattr__(self, "log_sigma_n", float(self.log_sigma_n))
        if not (np.all(np.isfinite(ell)) and math.isfinite(self.log_sigma_f) and math.isfinite(self.log_sigma_n)):
            raise InputError("hyperparameters must be finite")

    @classmethod
    def from_natural(cls, sigma_f, lengthscale, sigma_n) -> "Hyperparameters":
        return cls(math.log(sigma_f), np.log(np.atleast_1d(np.asarray(lengthscale, dtype=float))), math.log(sigma_n))

    @classmethod
    def from_vector(cls, theta) -> "Hyperparameters":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[0], theta[1:-1], theta[-1])

    def to_vector(self) -> np.ndarray:
        return np.concatenate(([self.log_sigma_f], self.log_lengthscale, [self.log_sigma_n]))

    @property
    def dim(self) -> int:
        return self.log_lengthscale.size

    @property
    def sigma_f(self) -> float:
        return math.exp(self.log_sigma_f)

    @property
    def sigma_n(self) -> float:
        return math.exp(self.log_sigma_n)

    @property
    def lengthscale(self) -> np.ndarray:
        return np.exp(self.log_lengthscale)

    def __eq__(self, other):
        if not isinstance(other, Hyperparameters):
            return NotImplemented
        return np.array_equal(self.to_vector(), other.to_vector())


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Per-feature z-scoring of inputs and mean-centering of targets."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0

    def __post_init__(self):
        for name in ("x_mean", "x_std"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "y_mean", float(self.y_mean))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim), 0.0)

    @classmethod
    def fit(cls, X, y) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        std = X.std(axis=0)
        if np.any(std <= 0):
            cols = np.flatnonzero(std <= 0).tolist()
            raise InputError(f"constant feature column(s) {cols}; cannot standardize")
        return cls(X.mean(axis=0), std, float(np.mean(y)))

    def transform_x(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_std

    def transform_y(self, y) -> np.ndarray:
        return np.asarray(y, dtype=float) - self.y_mean


@dataclass(frozen=True)
class TrainingSet:
    X: np.ndarray
    y: np.ndarray
    standardizer: Standardizer

    @classmethod
    def from_raw(cls, raw_X, raw_y) -> "TrainingSet":
        raw_X = np.atleast_2d(np.asarray(raw_X, dtype=float))
        raw_y = np.asarray(raw_y, dtype=float).reshape(-1)
        if raw_X.shape[0] != raw_y.size:
            raise DimensionMismatch(f"{raw_X.shape[0]} input rows but {raw_y.size} targets")
        if raw_y.size < 2:
            raise InputError("need at least 2 training points")
        if not (np.all(np.isfinite(raw_X)) and np.all(np.isfinite(raw_y))):
            raise InputError("training data contain NaN or inf")
        st = Standardizer.fit(raw_X, raw_y)
        return cls(st.transform_x(raw_X), st.transform_y(raw_y), st)


@dataclass(frozen=True)
class PosteriorPrediction:
    mean: float
    variance: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True, eq=False)
class TrainedModel:
    hyper: Hyperparameters
    X_train: np.ndarray
    y_train: np.ndarray
    chol_phi: np.ndarray
    alpha: np.ndarray
    standardizer: Standardizer
    lml: float
    jitter: float = JITTER

    def __post_init__(self):
        for name in ("X_train", "y_train", "chol_phi", "alpha"):
            getattr(self, name).setflags(write=False)

    def predict(self, x_star_raw) -> PosteriorPrediction:
        return predict(self, x_star_raw)


@dataclass
class FitConfig:
    """Multi-start training options.

    ``initial`` adds user-supplied starting points ahead of the random ones.
    ``fixed_log_sigma_n`` pins the noise level and optimizes the remaining
    parameters only. Signal and noise bounds are relative to the standard
    deviation of the training targets.
    """

    restarts: int = 10
    seed: int = 42
    max_iter: int = 1000
    ftol: float = 1e-13
    gtol: float = 1e-9
    initial: Sequence[Hyperparameters] = field(default_factory=tuple)
    fixed_log_sigma_n: Optional[float] = None
    log_lengthscale_bounds: tuple[float, float] = (math.log(1e-3), math.log(1e4))
    log_sigma_f_bounds: tuple[float, float] = (math.log(1e-4), math.log(1e3))
    log_sigma_n_bounds: tuple[float, float] = (math.log(1e-6), math.log(10.0))

    def __post_init__(self):
        if self.restarts < 0 or (self.restarts == 0 and not self.initial):
            raise ValueError("need at least one restart or initial point")


# ---------------------------------------------------------------------------
# kernel


def _check_dim(X: np.ndarray, hyper: Hyperparameters):
    if X.shape[-1] != hyper.dim:
        raise DimensionMismatch(f"inputs have {X.shape[-1]} features, hyperparameters {hyper.dim}")


def kernel_ard(x_i, x_j, hyper: Hyperparameters) -> float:
    x_i = np.asarray(x_i, dtype=float).reshape(-1)
    x_j = np.asarray(x_j, dtype=float).reshape(-1)
    if x_i.size != x_j.size:
        raise DimensionMismatch(f"vectors of length {x_i.size} and {x_j.size}")
    _check_dim(x_i, hyper)
    r2 = np.sum(((x_i - x_j) / hyper.lengthscale) ** 2)
    return hyper.sigma_f**2 * math.exp(-0.5 * r2)


def cross_kernel(A, B, hyper: Hyperparameters) -> np.ndarray:
    """Noise-free ARD-SE covariance between the rows of ``A`` and ``B``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    _check_dim(A, hyper)
    _check_dim(B, hyper)
    ell = hyper.lengthscale
    diff = A[:, None, :] / ell - B[None, :, :] / ell
    return hyper.sigma_f**2 * np.exp(-0.5 * np.sum(diff**2, axis=-1))


def kernel_matrix(X, hyper: Hyperparameters, jitter: float = JITTER) -> np.ndarray:
    """``K_f + (sigma_n**2 + jitter) I``; exactly symmetric."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    K = cross_kernel(X, X, hyper)
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] += hyper.sigma_n**2 + jitter
    return K


def _factor(X, hyper: Hyperparameters, jitter: float = JITTER):
    """Cholesky factor of ``phi``; jitter escalates x10 up to ``MAX_JITTER / JITTER`` times its start."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    K_f = cross_kernel(X, X, hyper)
    K_f = 0.5 * (K_f + K_f.T)
    base = K_f + hyper.sigma_n**2 * np.eye(len(X))
    cap = jitter * (MAX_JITTER / JITTER) * (1 + 1e-9)
    while jitter <= cap:
        try:
            L = cholesky(base + jitter * np.eye(len(X)), lower=True, check_finite=True)
            return L, K_f, jitter
        except (LinAlgError, ValueError):
            jitter *= 10.0
    raise FactorizationFailure(f"covariance matrix not positive definite even with jitter {cap:g}")


def _lml_from_factor(L, y) -> tuple[float, np.ndarray]:
    alpha = cho_solve((L, True), y, check_finite=False)
    n = y.size
    lml = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * n * _LOG_2PI
    return lml, alpha


def log_marginal_likelihood(X, y, hyper: Hyperparameters, jitter: float = JITTER) -> float:
    """``-1/2 y' phi^-1 y - 1/2 log det phi - n/2 log 2 pi``."""
    y = np.asarray(y, dtype=float).reshape(-1)
    L, _, _ = _factor(X, hyper, jitter)
    return _lml_from_factor(L, y)[0]


def _lml_and_gradient(X, y, hyper: Hyperparameters, jitter: float = JITTER):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    L, K_f, _ = _factor(X, hyper, jitter)
    lml, alpha = _lml_from_factor(L, y)
    phi_inv = cho_solve((L, True), np.eye(len(y)), check_finite=False)
    W = np.outer(alpha, alpha) - phi_inv

    # d lml / d theta_i = 1/2 tr(W dphi/dtheta_i), with dphi taken w.r.t. log-parameters
    grad = np.empty(hyper.dim + 2)
    WK = W * K_f
    grad[0] = np.sum(WK)  # dphi/dlog sigma_f = 2 K_f
    ell = hyper.lengthscale
    for d in range(hyper.dim):
        sq = (X[:, d, None] - X[None, :, d]) ** 2 / ell[d] ** 2
        grad[1 + d] = 0.5 * np.sum(WK * sq)
    grad[-1] = hyper.sigma_n**2 * np.trace(W)  # dphi/dlog sigma_n = 2 sigma_n^2 I
    return lml, grad


def lml_gradient(X, y, hyper: Hyperparameters, jitter: float = JITTER) -> np.ndarray:
    """Analytic gradient of the log marginal likelihood in log-parameter space."""
    return _lml_and_gradient(X, y, hyper, jitter)[1]


# ---------------------------------------------------------------------------
# training


def _random_starts(rng: np.random.Generator, count: int, dim: int) -> list[np.ndarray]:
    # unit-variance targets, so the signal and noise ranges need no rescaling here
    starts = []
    for _ in range(count):
        log_ell = rng.uniform(math.log(0.1), math.log(10.0), size=dim)
        log_sf = rng.uniform(math.log(0.1), math.log(10.0))
        log_sn = rng.uniform(math.log(1e-3), math.log(1.0))
        starts.append(np.concatenate(([log_sf], log_ell, [log_sn])))
    return starts


def _optimize_from(theta0, X, y, cfg: FitConfig, bounds, free):
    """Maximize the lml from ``theta0``; returns ``(theta, lml)`` of the best point seen."""
    full = theta0.copy()
    best = {"lml": -np.inf, "theta": None}

    def objective(z):
        full[free] = z
        hyper = Hyperparameters.from_vector(full)
        try:
            lml, grad = _lml_and_gradient(X, y, hyper)
        except FactorizationFailure:
            return 1e25, np.zeros_like(z)
        if lml > best["lml"]:
            best["lml"], best["theta"] = lml, full.copy()
        return -lml, -grad[free]

    z0 = np.clip(theta0[free], [b[0] for b in bounds], [b[1] for b in bounds])
    minimize(
        objective,
        z0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": cfg.max_iter, "ftol": cfg.ftol, "gtol": cfg.gtol},
    )
    if best["theta"] is None:
        raise FactorizationFailure("no evaluable point along the optimization path")
    return best["theta"], best["lml"]


def fit(raw_X, raw_y, config: Optional[FitConfig] = None) -> TrainedModel:
    """Standardize, run multi-start lml maximization, and factor the winner.

    The search runs on targets divided by their standard deviation, so the
    optimizer sees the same problem whatever the target units; the winning
    signal and noise levels are converted back before the final factorization.
    Bounds in ``config`` are therefore relative to the target spread, while
    ``initial`` and ``fixed_log_sigma_n`` are in target units.
    """
    cfg = config or FitConfig()
    ts = TrainingSet.from_raw(raw_X, raw_y)
    X, y = ts.X, ts.y
    dim = X.shape[1]
    y_scale = float(np.std(y)) or 1.0
    log_scale = math.log(y_scale)
    y_unit = y / y_scale
    to_unit = np.zeros(dim + 2)
    to_unit[0] = to_unit[-1] = -log_scale

    starts = []
    for h in cfg.initial:
        s = h.to_vector()
        if s.size != dim + 2:
            raise DimensionMismatch(f"initial hyperparameters have {s.size - 2} lengthscales, data {dim} features")
        starts.append(s + to_unit)
    starts += _random_starts(np.random.default_rng(cfg.seed), cfg.restarts, dim)

    bounds = [cfg.log_sigma_f_bounds] + [cfg.log_lengthscale_bounds] * dim + [cfg.log_sigma_n_bounds]
    free = np.ones(dim + 2, dtype=bool)
    if cfg.fixed_log_sigma_n is not None:
        free[-1] = False
        bounds = bounds[:-1]
        for s in starts:
            s[-1] = cfg.fixed_log_sigma_n - log_scale

    best_theta, best_lml = None, -np.inf
    for k, theta0 in enumerate(starts):
        try:
            theta, lml = _optimize_from(np.array(theta0, dtype=float), X, y_unit, cfg, bounds, free)
        except FactorizationFailure as exc:
            logger.warning("restart %d failed: %s", k, exc)
            continue
        logger.debug("restart %d: lml=%.6f", k, lml)
        if lml > best_lml:
            best_theta, best_lml = theta, lml
    if best_theta is None:
        raise AllRestartsFailed(f"all {len(starts)} restarts hit factorization failures")
    best = best_theta - to_unit
    if cfg.fixed_log_sigma_n is not None:
        best[-1] = cfg.fixed_log_sigma_n
    return build_model(X, y, Hyperparameters.from_vector(best), ts.standardizer)


def build_model(X, y, hyper: Hyperparameters, standardizer: Standardizer) -> TrainedModel:
    """Factor ``phi`` for fixed hyperparameters on already-standardized data.

    The starting jitter is ``JITTER`` times the target variance, matching the
    unit-variance problem the optimizer solved.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float)).copy()
    y = np.asarray(y, dtype=float).reshape(-1).copy()
    _check_dim(X, hyper)
    y_scale = float(np.std(y)) or 1.0
    L, _, jitter = _factor(X, hyper, JITTER * y_scale**2)
    lml, alpha = _lml_from_factor(L, y)
    return TrainedModel(hyper, X, y, L, alpha, standardizer, lml, jitter)


# ---------------------------------------------------------------------------
# prediction


def predict_many(model: TrainedModel, X_star_raw) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and variances (noise included) for each row of ``X_star_raw``."""
    X_star_raw = np.atleast_2d(np.asarray(X_star_raw, dtype=float))
    if X_star_raw.shape[1] != model.hyper.dim:
        raise DimensionMismatch(f"query has {X_star_raw.shape[1]} features, model {model.hyper.dim}")
    Xs = model.standardizer.transform_x(X_star_raw)
    k_star = cross_kernel(model.X_train, Xs, model.hyper)
    mean = k_star.T @ model.alpha + model.standardizer.y_mean
    v = solve_triangular(model.chol_phi, k_star, lower=True, check_finite=False)
    var = model.hyper.sigma_n**2 + model.hyper.sigma_f**2 - np.sum(v**2, axis=0)
    if np.any(var < 0):
        logger.debug("clamping %d slightly negative variances to 0", int(np.sum(var < 0)))
        var = np.maximum(var, 0.0)
    return mean, var


def predict(model: TrainedModel, x_star_raw) -> PosteriorPrediction:
    x = np.asarray(x_star_raw, dtype=float).reshape(1, -1)
    mean, var = predict_many(model, x)
    m, s2 = float(mean[0]), float(var[0])
    half = CI_Z * math.sqrt(s2)
    return PosteriorPrediction(m, s2, m - half, m + half)


# ---------------------------------------------------------------------------
# serialization


def model_to_dict(model: TrainedModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "hyperparameters": {
            "log_sigma_f": model.hyper.log_sigma_f,
            "log_lengthscale": model.hyper.log_lengthscale.tolist(),
            "log_sigma_n": model.hyper.log_sigma_n,
        },
        "standardizer": {
            "x_mean": model.standardizer.x_mean.tolist(),
            "x_std": model.standardizer.x_std.tolist(),
            "y_mean": model.standardizer.y_mean,
        },
        "X_train": model.X_train.tolist(),
        "y_train": model.y_train.tolist(),
        "alpha": model.alpha.tolist(),
        "chol_phi": model.chol_phi.tolist(),
        "jitter": model.jitter,
        "lml": model.lml,
    }


def model_from_dict(doc: dict) -> TrainedModel:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported model format version {version!r}")
    h = doc["hyperparameters"]
    s = doc["standardizer"]
    return TrainedModel(
        hyper=Hyperparameters(h["log_sigma_f"], h["log_lengthscale"], h["log_sigma_n"]),
        X_train=np.array(doc["X_train"], dtype=float),
        y_train=np.array(doc["y_train"], dtype=float),
        chol_phi=np.array(doc["chol_phi"], dtype=float),
        alpha=np.array(doc["alpha"], dtype=float),
        standardizer=Standardizer(s["x_mean"], s["x_std"], s["y_mean"]),
        lml=float(doc["lml"]),
        jitter=float(doc["jitter"]),
    )


def dumps_model(model: TrainedModel) -> str:
    return json.dumps(model_to_dict(model), indent=1, sort_keys=True)


def loads_model(text: str) -> TrainedModel:
    return model_from_dict(json.loads(text))
