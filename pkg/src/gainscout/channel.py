"""Synthetic ground-truth gain fields and the measurement model.

The field is a declared surrogate for a ray tracer: log-distance path loss
plus exponentially-correlated shadowing plus a per-building blockage penalty
along the transmitter-receiver segment.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from ._util import atomic_write_text, substream
from .grid import UrbanWorld

SCHEMA_VERSION = 1

# Above this many joint cells, exact Cholesky sampling is replaced by a
# random-spectral-feature approximation.
CHOLESKY_CELL_LIMIT = 5000
RFF_FEATURES = 4096


@dataclass(frozen=True)
class TruthParams:
    """Ground-truth channel parameters of the synthetic surrogate."""

    alpha0: float = -30.0
    beta0: float = 20.0
    phi0: float = 25.0
    delta0: float = 50.0
    blockage_db: float = 15.0
    noise_db: float = 0.0  # measurement-noise hook; the model assumes 0

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True, eq=False)
class GainField:
    """Ground-truth channel gain over the prediction and UAV planes.

    ``pred_plane`` and ``uav_plane`` are dB vectors of length nx*ny, row-major
    over (i, j) cells.  Indoor cells carry generated values too; masks from
    the world decide which cells count.
    """

    tx: np.ndarray
    pred_plane: np.ndarray
    uav_plane: np.ndarray
    params: TruthParams
    seed: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("tx", "pred_plane", "uav_plane"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __eq__(self, other):
        if not isinstance(other, GainField):
            return NotImplemented
        return (
            np.array_equal(self.tx, other.tx)
            and np.array_equal(self.pred_plane, other.pred_plane)
            and np.array_equal(self.uav_plane, other.uav_plane)
            and self.params == other.params
            and self.seed == other.seed
        )


@dataclass(frozen=True)
class MeasurementLog:
    """Ordered first-visit cells on the flight plane with their gain samples."""

    visited: tuple = ()  # ((i, j, first_visit_step), ...)
    values: tuple = ()

    def __post_init__(self):
        cells = [(i, j) for i, j, _ in self.visited]
        if len(set(cells)) != len(cells):
            raise ValueError("duplicate cells in measurement log")
        if len(self.values) != len(self.visited):
            raise ValueError("visited/values length mismatch")

    def __len__(self):
        return len(self.visited)

    @property
    def cells(self):
        return tuple((i, j) for i, j, _ in self.visited)

    def y(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def coords(self, world: UrbanWorld, altitude_m=None) -> np.ndarray:
        d = world.spec.spacing_m
        z = world.spec.uav_altitude_m if altitude_m is None else altitude_m
        return np.array([[i * d, j * d, z] for i, j in self.cells])


def exp_kernel(points_a, points_b, phi, delta) -> np.ndarray:
    """Exponentially decaying cross-covariance phi * exp(-r / delta)."""
    return phi * np.exp(-cdist(points_a, points_b) / delta)


def _sample_rff(points, rng, phi, delta, n_features):
    # Spectral sampling for the 3-d exponential kernel: frequencies follow a
    # multivariate Student-t with one degree of freedom, scaled by 1/delta.
    z = rng.standard_normal((n_features, 3))
    chi = np.abs(rng.standard_normal(n_features))
    omega = z / (delta * chi[:, None])
    b = rng.uniform(0, 2 * np.pi, n_features)
    weights = rng.standard_normal(n_features)
    proj = points @ omega.T + b
    return np.sqrt(2 * phi / n_features) * (np.cos(proj) @ weights)


def sample_shadowing(world: UrbanWorld, seed: int, phi0: float, delta0: float):
    """Draw one zero-mean correlated shadowing realization jointly on the
    prediction and UAV planes.

    Returns (pred_vec, uav_vec, info).  Sampling is joint so that flight-plane
    measurements are statistically consistent with prediction-plane truth.
    Exact Cholesky is used up to CHOLESKY_CELL_LIMIT joint cells, a
    random-spectral-feature approximation above that.
    """
    if phi0 <= 0 or delta0 <= 0:
        raise ValueError("shadowing hyperparameters must be positive")
    rng = np.random.default_rng(substream(seed, "shadowing"))
    pred_pts = world.plane_coords(world.spec.pred_altitude_m)
    uav_pts = world.plane_coords(world.spec.uav_altitude_m)
    same_plane = world.spec.pred_altitude_m == world.spec.uav_altitude_m
    points = pred_pts if same_plane else np.vstack([pred_pts, uav_pts])

    if len(points) <= CHOLESKY_CELL_LIMIT:
        cov = exp_kernel(points, points, phi0, delta0)
        cov[np.diag_indices_from(cov)] += 1e-10 * phi0
        sample = np.linalg.cholesky(cov) @ rng.standard_normal(len(points))
        info = {"method": "cholesky"}
    else:
        sample = _sample_rff(points, rng, phi0, delta0, RFF_FEATURES)
        info = {"method": "rff", "n_features": RFF_FEATURES}

    n = len(pred_pts)
    if same_plane:
        return sample, sample.copy(), info
    return sample[:n], sample[n:], info


def count_blockages(world: UrbanWorld, p0, p1) -> int:
    """Number of distinct obstructions the 3D segment p0 -> p1 passes through.

    Walks the segment across grid columns; a maximal run of consecutive
    blocked columns counts as one building.  Symmetric in its endpoints.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    d = world.spec.spacing_m
    seg = p1 - p0
    # Parameter values where the segment crosses cell boundaries in x or y.
    # Cell (i, j) spans [i*d - d/2, i*d + d/2) x [j*d - d/2, j*d + d/2).
    ts = {0.0, 1.0}
    for axis in (0, 1):
        if abs(seg[axis]) < 1e-12:
            continue
        lo, hi = sorted((p0[axis], p1[axis]))
        k0 = math.ceil((lo + d / 2) / d)
        k1 = math.floor((hi + d / 2) / d)
        for k in range(k0, k1 + 1):
            t = (k * d - d / 2 - p0[axis]) / seg[axis]
            if 0.0 < t < 1.0:
                ts.add(t)
    ts = sorted(ts)

    count = 0
    in_block = False
    for ta, tb in zip(ts[:-1], ts[1:]):
        tm = 0.5 * (ta + tb)
        mid = p0 + tm * seg
        i = int(round(mid[0] / d))
        j = int(round(mid[1] / d))
        if not world.in_bounds((i, j)):
            in_block = False
            continue
        zmin = min(p0[2] + ta * seg[2], p0[2] + tb * seg[2])
        blocked = world.heights[i, j] >= zmin
        if blocked and not in_block:
            count += 1
        in_block = blocked
    return count


def path_distance(points, tx, floor_m) -> np.ndarray:
    dist = np.linalg.norm(np.atleast_2d(points) - np.asarray(tx), axis=1)
    return np.maximum(dist, floor_m)


def synthesize_field(
    world: UrbanWorld, tx, seed: int, params: TruthParams = TruthParams()
) -> GainField:
    """Generate the ground-truth gain field for one transmitter.

    gain(q) = alpha0 - beta0 * ln(||q - tx||) + shadowing(q)
              - blockage_db * #buildings on the segment tx -> q

    Distances are floored at half the grid spacing.  Pure function of
    (world, tx, seed, params).
    """
    tx = np.asarray(tx, dtype=float)
    d = world.spec.spacing_m
    ti, tj = int(round(tx[0] / d)), int(round(tx[1] / d))
    if world.in_bounds((ti, tj)) and world.heights[ti, tj] >= tx[2]:
        raise ValueError("transmitter is inside a building at its altitude")

    sh_pred, sh_uav, info = sample_shadowing(world, seed, params.phi0, params.delta0)

    def plane_gain(altitude, shadowing):
        pts = world.plane_coords(altitude)
        gain = params.alpha0 - params.beta0 * np.log(path_distance(pts, tx, d / 2))
        gain += shadowing
        if params.blockage_db != 0.0:
            gain -= params.blockage_db * np.array(
                [count_blockages(world, tx, p) for p in pts], dtype=float
            )
        return gain

    pred = plane_gain(world.spec.pred_altitude_m, sh_pred)
    if world.spec.uav_altitude_m == world.spec.pred_altitude_m:
        uav = pred.copy()
    else:
        uav = plane_gain(world.spec.uav_altitude_m, sh_uav)
    return GainField(
        tx=tx,
        pred_plane=pred,
        uav_plane=uav,
        params=params,
        seed=seed,
        meta={"shadowing": info, "carrier_ghz": 5.0},
    )


def measure(
    field_: GainField, log: MeasurementLog, cells, step: int, world: UrbanWorld
) -> MeasurementLog:
    """Append first-visit cells with their exact flight-plane gains.

    Repeated cells are ignored, so the operation is idempotent.
    """
    seen = set(log.cells)
    visited = list(log.visited)
    values = list(log.values)
    for cell in cells:
        cell = (int(cell[0]), int(cell[1]))
        if not world.in_bounds(cell):
            raise ValueError(f"measured cell {cell} outside the AoI")
        if cell in seen:
            continue
        seen.add(cell)
        visited.append((cell[0], cell[1], step))
        values.append(float(field_.uav_plane[world.cell_index(cell)]))
    return MeasurementLog(visited=tuple(visited), values=tuple(values))


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.asarray(arr, "<f8").tobytes()).decode()


def _decode(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").copy()


def field_to_dict(field_: GainField) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "tx": field_.tx.tolist(),
        "params": field_.params.to_dict(),
        "seed": field_.seed,
        "pred_plane": _encode(field_.pred_plane),
        "uav_plane": _encode(field_.uav_plane),
        "meta": field_.meta,
    }


def field_from_dict(d: dict) -> GainField:
    return GainField(
        tx=np.asarray(d["tx"], dtype=float),
        pred_plane=_decode(d["pred_plane"]),
        uav_plane=_decode(d["uav_plane"]),
        params=TruthParams.from_dict(d["params"]),
        seed=d["seed"],
        meta=d.get("meta", {}),
    )


def save_field(field_: GainField, path):
    atomic_write_text(path, json.dumps(field_to_dict(field_), sort_keys=True))


def load_field(path) -> GainField:
    with open(path) as f:
        return field_from_dict(json.load(f))
