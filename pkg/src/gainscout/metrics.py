"""Evaluation of a mission's posterior against the ground-truth field."""

from __future__ import annotations

import numpy as np

from .grid import UrbanWorld

BIN_RANGE_DB = (-240.0, -80.0)
N_BINS = 16


def evaluation_mask(world: UrbanWorld, visited_cells) -> np.ndarray:
    """Boolean mask (nx*ny, row-major) of prediction-plane cells that count:
    outdoor at the prediction altitude and never measured by the swarm.

    Visits are matched by 2-D cell index regardless of the flight altitude.
    """
    mask = world.outdoor_mask(world.spec.pred_altitude_m).ravel().copy()
    for cell in visited_cells:
        i, j = int(cell[0]), int(cell[1])
        if world.in_bounds((i, j)):
            mask[i * world.ny + j] = False
    return mask


def rmse(truth, prediction, mask) -> float:
    """Root-mean-square prediction error (dB) over masked cells."""
    truth = np.asarray(truth, dtype=float)
    prediction = np.asarray(prediction, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if truth.shape != prediction.shape or truth.shape != mask.shape:
        raise ValueError("shape mismatch")
    if not mask.any():
        raise ValueError("empty evaluation mask")
    err = truth[mask] - prediction[mask]
    return float(np.sqrt(np.mean(err * err)))


def goodness_of_fit(truth, prediction, variance, mask) -> float:
    """Log of the mean ratio of squared error to predicted variance.

    Zero means the posterior variance is calibrated on average; positive
    values mean overconfidence (errors larger than predicted), negative
    underconfidence.
    """
    truth = np.asarray(truth, dtype=float)
    prediction = np.asarray(prediction, dtype=float)
    variance = np.asarray(variance, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    var = variance[mask]
    if np.any(var <= 0):
        raise ValueError("non-positive predicted variance on evaluated cells")
    err = truth[mask] - prediction[mask]
    return float(np.log(np.mean(err * err / var)))


def binned_rmse(
    truth, prediction, mask, n_bins: int = N_BINS, bin_range=BIN_RANGE_DB
):
    """RMSE per true-gain bin.

    Returns (edges, rmse_per_bin, counts); bins are uniform over
    ``bin_range`` in dB, edge-inclusive on the right for the last bin, and
    empty bins yield NaN.  Cells outside the range are dropped.
    """
    truth = np.asarray(truth, dtype=float)
    prediction = np.asarray(prediction, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    lo, hi = float(bin_range[0]), float(bin_range[1])
    if not lo < hi:
        raise ValueError("bin range must be increasing")
    edges = np.linspace(lo, hi, n_bins + 1)
    t = truth[mask]
    p = prediction[mask]
    keep = (t >= lo) & (t <= hi)
    t, p = t[keep], p[keep]
    which = np.clip(np.digitize(t, edges) - 1, 0, n_bins - 1)
    out = np.full(n_bins, np.nan)
    counts = np.zeros(n_bins, dtype=int)
    for b in range(n_bins):
        sel = which == b
        counts[b] = int(sel.sum())
        if counts[b]:
            err = t[sel] - p[sel]
            out[b] = float(np.sqrt(np.mean(err * err)))
    return edges, out, counts


def evaluate(world: UrbanWorld, field_pred_plane, result) -> dict:
    """Standard metric bundle for a finished mission."""
    mask = evaluation_mask(world, result.visited_cells)
    edges, per_bin, counts = binned_rmse(field_pred_plane, result.mean, mask)
    return {
        "rmse_db": rmse(field_pred_plane, result.mean, mask),
        "goodness_of_fit": goodness_of_fit(
            field_pred_plane, result.mean, result.variance, mask
        ),
        "n_evaluated": int(np.asarray(mask, dtype=bool).sum()),
        "n_visited": len(result.visited_cells),
        "bin_edges": edges.tolist(),
        "bin_rmse": [None if np.isnan(v) else float(v) for v in per_bin],
        "bin_counts": counts.tolist(),
    }
