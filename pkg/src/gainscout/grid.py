"""Discretized urban area of interest: grid geometry, UAV motion rules and
procedural Manhattan-style world generation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._util import atomic_write_text, substream

# Unit displacements, one grid cell each: +x, -x, +y, -y.
ACTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))
NUM_ACTIONS = len(ACTIONS)

SCHEMA_VERSION = 1


def _snap(value, spacing):
    """Snap an altitude to the nearest grid plane."""
    snapped = round(value / spacing) * spacing
    return max(spacing, snapped)


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the discretized area of interest.

    Lengths are in meters.  ``pred_altitude_m`` is the plane at which the gain
    field is predicted, ``uav_altitude_m`` the plane the UAVs fly in.  Both are
    snapped to the nearest multiple of ``spacing_m``.
    """

    length_m: float
    width_m: float
    height_m: float
    spacing_m: float
    pred_altitude_m: float = 10.0
    uav_altitude_m: float = 10.0

    def __post_init__(self):
        d = self.spacing_m
        if d <= 0:
            raise ValueError("spacing_m must be positive")
        for name in ("length_m", "width_m", "height_m"):
            v = getattr(self, name)
            n = v / d
            if v <= 0 or abs(n - round(n)) > 1e-9:
                raise ValueError(f"{name}={v} is not a positive multiple of spacing {d}")
        object.__setattr__(self, "pred_altitude_m", _snap(self.pred_altitude_m, d))
        object.__setattr__(self, "uav_altitude_m", _snap(self.uav_altitude_m, d))
        for name in ("pred_altitude_m", "uav_altitude_m"):
            v = getattr(self, name)
            if not 0 < v <= self.height_m:
                raise ValueError(f"{name}={v} outside (0, {self.height_m}]")

    @property
    def nx(self) -> int:
        return int(round(self.length_m / self.spacing_m))

    @property
    def ny(self) -> int:
        return int(round(self.width_m / self.spacing_m))

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def to_dict(self):
        return {
            "length_m": self.length_m,
            "width_m": self.width_m,
            "height_m": self.height_m,
            "spacing_m": self.spacing_m,
            "pred_altitude_m": self.pred_altitude_m,
            "uav_altitude_m": self.uav_altitude_m,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True, eq=False)
class UrbanWorld:
    """A building-height map over the grid plus optional no-fly cells.

    ``heights`` has shape (nx, ny); entry (i, j) is the building/terrain
    height in meters over the cell at coordinates (i*d, j*d).  A cell is
    blocked at altitude z iff its height is >= z.
    """

    spec: GridSpec
    heights: np.ndarray
    nofly: frozenset = frozenset()
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=float)
        if h.shape != (self.spec.nx, self.spec.ny):
            raise ValueError(f"heights shape {h.shape} != {(self.spec.nx, self.spec.ny)}")
        if h.min() < 0 or h.max() > self.spec.height_m:
            raise ValueError("heights must lie in [0, height_m]")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "nofly", frozenset(self.nofly))

    def __eq__(self, other):
        if not isinstance(other, UrbanWorld):
            return NotImplemented
        return (
            self.spec == other.spec
            and np.array_equal(self.heights, other.heights)
            and self.nofly == other.nofly
        )

    @property
    def nx(self):
        return self.spec.nx

    @property
    def ny(self):
        return self.spec.ny

    def in_bounds(self, cell) -> bool:
        i, j = cell
        return 0 <= i < self.nx and 0 <= j < self.ny

    def blocked_at(self, cell, altitude_m) -> bool:
        return bool(self.heights[cell[0], cell[1]] >= altitude_m)

    def outdoor_mask(self, altitude_m) -> np.ndarray:
        """Boolean (nx, ny) mask of cells whose height is below the plane."""
        return self.heights < altitude_m

    def flyable_mask(self) -> np.ndarray:
        mask = self.outdoor_mask(self.spec.uav_altitude_m).copy()
        for cell in self.nofly:
            if self.in_bounds(cell):
                mask[cell[0], cell[1]] = False
        return mask

    def plane_coords(self, altitude_m) -> np.ndarray:
        """(n_cells, 3) coordinates of all cell centers at an altitude,
        row-major over (i, j)."""
        d = self.spec.spacing_m
        ii, jj = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        out = np.empty((self.nx * self.ny, 3))
        out[:, 0] = ii.ravel() * d
        out[:, 1] = jj.ravel() * d
        out[:, 2] = altitude_m
        return out

    def cell_index(self, cell) -> int:
        return cell[0] * self.ny + cell[1]

    def cell_coord(self, cell, altitude_m) -> np.ndarray:
        d = self.spec.spacing_m
        return np.array([cell[0] * d, cell[1] * d, altitude_m])


@dataclass(frozen=True)
class SwarmState:
    """Positions of the N UAVs on the flight plane at a time step."""

    positions: tuple
    step: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "positions", tuple((int(i), int(j)) for i, j in self.positions)
        )

    @property
    def n_uavs(self):
        return len(self.positions)


def transition(state: SwarmState, action) -> SwarmState:
    """Displace every UAV by one cell along its chosen axis.

    Legality is not checked here; pair with :func:`is_legal`.
    """
    new = tuple(
        (i + ACTIONS[a][0], j + ACTIONS[a][1])
        for (i, j), a in zip(state.positions, action)
    )
    return SwarmState(positions=new, step=state.step + 1)


def cell_is_flyable(world: UrbanWorld, cell) -> bool:
    return (
        world.in_bounds(cell)
        and not world.blocked_at(cell, world.spec.uav_altitude_m)
        and tuple(cell) not in world.nofly
    )


def is_legal(world: UrbanWorld, state: SwarmState, action) -> bool:
    """True iff every UAV's next cell is inside the AoI, below the buildings
    and outside the no-fly set."""
    nxt = transition(state, action)
    return all(cell_is_flyable(world, c) for c in nxt.positions)


def legal_moves(world: UrbanWorld, cell):
    """Action indices legal for a single UAV at ``cell``."""
    out = []
    for a, (dx, dy) in enumerate(ACTIONS):
        if cell_is_flyable(world, (cell[0] + dx, cell[1] + dy)):
            out.append(a)
    return out


@dataclass(frozen=True)
class GenParams:
    """Parameters of the Manhattan-grid environment generator."""

    side_m: float = 486.0
    spacing_m: float = 4.0
    height_m: float = 60.0
    blocks_per_dim: int = 5
    open_space_prob: float = 0.25
    min_building_m: float = 12.0
    max_buildings_per_block: int = 3
    building_height_range: tuple = (8.0, 40.0)
    street_margin_cells: int = 1
    pred_altitude_m: float = 10.0
    uav_altitude_m: float = 10.0

    def to_dict(self):
        d = dict(self.__dict__)
        d["building_height_range"] = list(self.building_height_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["building_height_range"] = tuple(d["building_height_range"])
        return cls(**d)


def generate_world(seed: int, params: GenParams = GenParams()) -> UrbanWorld:
    """Procedurally generate a Manhattan-grid-like urban environment.

    The area is divided into ``blocks_per_dim**2`` city blocks with random
    extents (axis cuts drawn uniformly without replacement from interior grid
    lines); each block is left open with probability ``open_space_prob`` or
    filled with rectangular-base buildings of random footprint and height.
    Pure function of (seed, params).
    """
    d = params.spacing_m
    n = int(round(params.side_m / d))
    if n < params.blocks_per_dim:
        raise ValueError("area too small for the requested number of blocks")
    min_cells = max(1, int(round(params.min_building_m / d)))
    nominal_block = n // params.blocks_per_dim
    if min_cells > nominal_block:
        raise ValueError(
            f"minimum building size {params.min_building_m} m exceeds the "
            f"nominal block size {nominal_block * d} m"
        )
    lo_h, hi_h = params.building_height_range
    if not 0 < lo_h <= hi_h <= params.height_m:
        raise ValueError("building_height_range outside (0, height_m]")

    rng = np.random.default_rng(substream(seed, "world-gen"))
    heights = np.zeros((n, n))

    def cuts():
        interior = rng.choice(
            np.arange(1, n), size=params.blocks_per_dim - 1, replace=False
        )
        return [0, *sorted(int(c) for c in interior), n]

    xs, ys = cuts(), cuts()
    m = params.street_margin_cells
    for bx in range(params.blocks_per_dim):
        for by in range(params.blocks_per_dim):
            if rng.random() < params.open_space_prob:
                continue
            x0, x1 = xs[bx] + m, xs[bx + 1] - m
            y0, y1 = ys[by] + m, ys[by + 1] - m
            if x1 - x0 < min_cells or y1 - y0 < min_cells:
                continue
            for _ in range(int(rng.integers(1, params.max_buildings_per_block + 1))):
                w = int(rng.integers(min_cells, x1 - x0 + 1))
                l = int(rng.integers(min_cells, y1 - y0 + 1))
                ox = x0 + int(rng.integers(0, x1 - x0 - w + 1))
                oy = y0 + int(rng.integers(0, y1 - y0 - l + 1))
                h = rng.uniform(lo_h, hi_h)
                block = heights[ox : ox + w, oy : oy + l]
                np.maximum(block, h, out=block)

    spec = GridSpec(
        length_m=n * d,
        width_m=n * d,
        height_m=math.ceil(params.height_m / d) * d,
        spacing_m=d,
        pred_altitude_m=params.pred_altitude_m,
        uav_altitude_m=params.uav_altitude_m,
    )
    return UrbanWorld(
        spec=spec, heights=heights, meta={"seed": seed, "params": params.to_dict()}
    )


def crop_world(world: UrbanWorld, seed: int, side_m: float) -> UrbanWorld:
    """Extract a square sub-world of side ``side_m`` with a random center."""
    d = world.spec.spacing_m
    nc = int(round(side_m / d))
    if nc > min(world.nx, world.ny):
        raise ValueError(f"crop side {side_m} m exceeds the world extent")
    rng = np.random.default_rng(substream(seed, "world-crop"))
    ox = int(rng.integers(0, world.nx - nc + 1))
    oy = int(rng.integers(0, world.ny - nc + 1))
    heights = world.heights[ox : ox + nc, oy : oy + nc].copy()
    nofly = frozenset(
        (i - ox, j - oy)
        for i, j in world.nofly
        if ox <= i < ox + nc and oy <= j < oy + nc
    )
    spec = replace(world.spec, length_m=nc * d, width_m=nc * d)
    meta = dict(world.meta)
    meta["crop"] = {"seed": seed, "origin": [ox, oy], "side_m": side_m}
    return UrbanWorld(spec=spec, heights=heights, nofly=nofly, meta=meta)


def world_to_dict(world: UrbanWorld) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "spec": world.spec.to_dict(),
        "heights": {
            "shape": list(world.heights.shape),
            "data": world.heights.ravel().tolist(),
        },
        "nofly": sorted(list(c) for c in world.nofly),
        "meta": world.meta,
    }


def world_from_dict(d: dict) -> UrbanWorld:
    spec = GridSpec.from_dict(d["spec"])
    heights = np.asarray(d["heights"]["data"], dtype=float).reshape(
        d["heights"]["shape"]
    )
    nofly = frozenset(tuple(c) for c in d.get("nofly", []))
    return UrbanWorld(spec=spec, heights=heights, nofly=nofly, meta=d.get("meta", {}))


def save_world(world: UrbanWorld, path):
    atomic_write_text(path, json.dumps(world_to_dict(world), sort_keys=True))


def load_world(path) -> UrbanWorld:
    with open(path) as f:
        return world_from_dict(json.load(f))
