"""Kriging / Gaussian-process prediction of the gain field.

Path loss follows a log-distance trend alpha - beta * ln(r); the shadowing
residual is a zero-mean GP with the exponentially decaying kernel
phi * exp(-r / delta).  Hyperparameters are fitted from measurement data:
(alpha, beta) by ordinary least squares and (phi, delta) by deterministic
negative-log-likelihood minimization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._util import atomic_write_text

SCHEMA_VERSION = 1

JITTER_SCALE = 1e-6  # default jitter is JITTER_SCALE * phi on the diagonal
VAR_CLAMP = 1e-9  # posterior variances above -VAR_CLAMP are clamped to 0


@dataclass(frozen=True)
class KrigingModel:
    """Fitted path-loss constants and kernel hyperparameters."""

    alpha: float
    beta: float
    phi: float
    delta: float
    jitter: float = None
    distance_floor_m: float = 1.0
    fit_metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.phi <= 0 or self.delta <= 0:
            raise ValueError("phi and delta must be positive")
        if self.jitter is None:
            object.__setattr__(self, "jitter", JITTER_SCALE * self.phi)
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


@dataclass(frozen=True)
class Posterior:
    """Gaussian posterior over query cells: mean (dB), variance (dB^2) and
    optionally the full covariance."""

    mean: np.ndarray
    variance: np.ndarray
    cov: np.ndarray = None


def path_loss(points, tx, alpha, beta, floor_m=1.0):
    """Log-distance trend alpha - beta * ln(||q - tx||), distance floored."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    dist = np.linalg.norm(points - np.asarray(tx, dtype=float), axis=1)
    return alpha - beta * np.log(np.maximum(dist, floor_m))


def fit_path_loss(distances, gains):
    """Least-squares fit of gains against (1, -ln distance).

    Returns (alpha, beta).  Solved through the normal equations of the
    two-column design matrix, which is the exact MSE minimizer.
    """
    distances = np.asarray(distances, dtype=float)
    gains = np.asarray(gains, dtype=float)
    if len(distances) < 2 or np.ptp(distances) == 0:
        raise ValueError("need at least two samples at distinct distances")
    design = np.column_stack([np.ones_like(distances), -np.log(distances)])
    coef, *_ = np.linalg.lstsq(design, gains, rcond=None)
    return float(coef[0]), float(coef[1])


def kernel(points_a, points_b, phi, delta):
    """Shadowing cross-covariance phi * exp(-||q_i - q_j|| / delta)."""
    if phi <= 0 or delta <= 0:
        raise ValueError("phi and delta must be positive")
    a = np.atleast_2d(np.asarray(points_a, dtype=float))
    b = np.atleast_2d(np.asarray(points_b, dtype=float))
    return phi * np.exp(-cdist(a, b) / delta)


def negative_log_likelihood(points, residuals, phi, delta, jitter):
    """0.5 log|K| + 0.5 y^T K^-1 y (constant dropped) for the zero-mean GP."""
    k = kernel(points, points, phi, delta)
    k[np.diag_indices_from(k)] += jitter
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        return np.inf
    alpha = solve_triangular(chol, residuals, lower=True)
    return float(np.sum(np.log(np.diag(chol))) + 0.5 * alpha @ alpha)


def fit_kernel(points, residuals, grid_size=12, refine_rounds=3, jitter_scale=JITTER_SCALE):
    """Fit (phi, delta) by NLL minimization over a deterministic search.

    A log-spaced grid over both hyperparameters is followed by rounds of
    local log-grid refinement around the incumbent.  Returns
    (phi, delta, nll_at_minimum).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    residuals = np.asarray(residuals, dtype=float)
    if len(points) < 3:
        raise ValueError("need at least 3 residual samples")

    var = max(float(np.var(residuals)), 1e-6)
    dists = cdist(points, points)
    pos = dists[dists > 0]
    if len(pos) == 0:
        raise ValueError("residual locations are all identical")
    d_lo, d_hi = float(pos.min()) / 4.0, float(dists.max()) * 4.0

    def nll(phi, delta):
        return negative_log_likelihood(points, residuals, phi, delta, jitter_scale * phi)

    phis = np.geomspace(var / 30.0, var * 30.0, grid_size)
    deltas = np.geomspace(d_lo, d_hi, grid_size)
    best = (np.inf, phis[0], deltas[0])
    for p in phis:
        for de in deltas:
            v = nll(p, de)
            if v < best[0]:
                best = (v, p, de)

    # Local refinement: shrink a 2-D log-grid around the incumbent.  The NLL
    # surface has a diagonal phi/delta ridge, so both axes move together.
    span = 3.0
    for _ in range(refine_rounds):
        _, p0, d0 = best
        for p in np.geomspace(p0 / span, p0 * span, grid_size):
            for de in np.geomspace(d0 / span, d0 * span, grid_size):
                v = nll(p, de)
                if v < best[0]:
                    best = (v, p, de)
        span = max(span**0.5, 1.05)

    nll_min, phi, delta = best
    return float(phi), float(delta), float(nll_min)


def _chol_with_escalation(cov, jitter):
    """Cholesky of cov + jitter*I, escalating jitter x10 at most twice."""
    j = jitter
    for _ in range(3):
        k = cov.copy()
        k[np.diag_indices_from(k)] += j
        try:
            return np.linalg.cholesky(k), j
        except np.linalg.LinAlgError:
            j = max(j, 1e-12) * 10.0
    raise np.linalg.LinAlgError(
        "observation covariance is not positive definite after jitter escalation"
    )


def posterior(
    model: KrigingModel, tx, obs_points, obs_values, query_points, want_full_cov=False
) -> Posterior:
    """Gaussian posterior of the gain at query points given measurements.

    The shadowing residual (measurements minus fitted path loss) is
    conditioned through the kernel; the path-loss trend is added back at the
    queries.  Solved via Cholesky, never explicit inversion.
    """
    obs_points = np.atleast_2d(np.asarray(obs_points, dtype=float))
    query_points = np.atleast_2d(np.asarray(query_points, dtype=float))
    if len(obs_points) == 0:
        raise ValueError("posterior requires at least one measurement")
    resid = np.asarray(obs_values, dtype=float) - path_loss(
        obs_points, tx, model.alpha, model.beta, model.distance_floor_m
    )

    s_vv = kernel(obs_points, obs_points, model.phi, model.delta)
    chol, _ = _chol_with_escalation(s_vv, model.jitter)
    s_vq = kernel(obs_points, query_points, model.phi, model.delta)

    mean = s_vq.T @ cho_solve((chol, True), resid)
    mean += path_loss(query_points, tx, model.alpha, model.beta, model.distance_floor_m)

    half = solve_triangular(chol, s_vq, lower=True)
    if want_full_cov:
        cov = kernel(query_points, query_points, model.phi, model.delta) - half.T @ half
        cov = 0.5 * (cov + cov.T)
        var = np.diag(cov).copy()
    else:
        cov = None
        var = model.phi - np.sum(half * half, axis=0)
    var[(var < 0) & (var > -VAR_CLAMP)] = 0.0
    return Posterior(mean=mean, variance=var, cov=cov)


def posterior_variance_field(model: KrigingModel, tx, obs_points, world, altitude_m=None):
    """Diagonal posterior variance over all outdoor cells of a plane.

    Depends only on the measured locations, not on the measured values.
    Returns (variance_vector, cell_indices) where cell_indices are row-major
    indices of the outdoor cells.
    """
    alt = world.spec.pred_altitude_m if altitude_m is None else altitude_m
    outdoor = world.outdoor_mask(alt).ravel()
    queries = world.plane_coords(alt)[outdoor]
    obs_points = np.atleast_2d(np.asarray(obs_points, dtype=float))
    s_vv = kernel(obs_points, obs_points, model.phi, model.delta)
    chol, _ = _chol_with_escalation(s_vv, model.jitter)
    s_vq = kernel(obs_points, queries, model.phi, model.delta)
    half = solve_triangular(chol, s_vq, lower=True)
    var = model.phi - np.sum(half * half, axis=0)
    var[(var < 0) & (var > -VAR_CLAMP)] = 0.0
    return var, np.flatnonzero(outdoor)


class KrigingPredictor(RegressorMixin, BaseEstimator):
    """Scikit-learn style estimator wrapping the Kriging predictor.

    X is an (n, 3) array of coordinates in meters, y the measured gains in
    dB.  ``fit`` estimates (alpha, beta) by least squares against log
    distance to ``tx`` and, unless given, (phi, delta) by NLL minimization
    of the residuals.  ``predict`` returns the posterior mean, optionally
    with per-point standard deviation or the full covariance.
    """

    def __init__(self, tx=None, phi=None, delta=None, jitter=None, distance_floor_m=1.0):
        self.tx = tx
        self.phi = phi
        self.delta = delta
        self.jitter = jitter
        self.distance_floor_m = distance_floor_m

    def fit(self, X, y):
        if self.tx is None:
            raise ValueError("tx (transmitter coordinates) is required")
        X, y = check_X_y(X, y)
        if X.shape[1] != 3:
            raise ValueError("X must be (n, 3) coordinates in meters")
        dist = np.maximum(
            np.linalg.norm(X - np.asarray(self.tx, dtype=float), axis=1),
            self.distance_floor_m,
        )
        alpha, beta = fit_path_loss(dist, y)
        if self.phi is not None and self.delta is not None:
            phi, delta, nll = float(self.phi), float(self.delta), None
        else:
            resid = y - (alpha - beta * np.log(dist))
            phi, delta, nll = fit_kernel(X, resid)
        self.model_ = KrigingModel(
            alpha=alpha,
            beta=beta,
            phi=phi,
            delta=delta,
            jitter=self.jitter,
            distance_floor_m=self.distance_floor_m,
            fit_metadata={"n_samples": len(y), "nll": nll},
        )
        self.X_ = X
        self.y_ = y
        return self

    def predict(self, X, return_std=False, return_cov=False):
        check_is_fitted(self, "model_")
        X = check_array(X)
        post = posterior(
            self.model_, self.tx, self.X_, self.y_, X, want_full_cov=return_cov
        )
        if return_cov:
            return post.mean, post.cov
        if return_std:
            return post.mean, np.sqrt(np.maximum(post.variance, 0.0))
        return post.mean


def model_to_dict(model: KrigingModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "alpha": model.alpha,
        "beta": model.beta,
        "phi": model.phi,
        "delta": model.delta,
        "jitter": model.jitter,
        "distance_floor_m": model.distance_floor_m,
        "fit_metadata": model.fit_metadata,
    }


def model_from_dict(d: dict) -> KrigingModel:
    return KrigingModel(
        alpha=d["alpha"],
        beta=d["beta"],
        phi=d["phi"],
        delta=d["delta"],
        jitter=d["jitter"],
        distance_floor_m=d.get("distance_floor_m", 1.0),
        fit_metadata=d.get("fit_metadata", {}),
    )


def save_model(model: KrigingModel, path):
    atomic_write_text(path, json.dumps(model_to_dict(model), sort_keys=True))


def load_model(path) -> KrigingModel:
    with open(path) as f:
        return model_from_dict(json.load(f))
