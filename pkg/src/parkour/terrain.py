"""Procedural curriculum parkour tracks as height fields.

A track is a flat spawn pad followed by a row of obstacles of one kind
(gap, step, hurdle, stairs) whose geometry interpolates linearly from
level-1 minima to the level-10 maxima. Generation is a pure function of
(kind, level, seed, randomize): the same arguments always give a
bit-identical grid.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TerrainConfig

TRACK_KINDS = ("flat", "gap", "step", "hurdle", "stairs")
MAX_LEVEL = 10
MAX_ABS_HEIGHT = 2.0

_BINARY_MAGIC = b"PKHF"
_BINARY_VERSION = 1

# Fixed obstacle footprints along x; heights/depths come from TerrainParams.
_STEP_PLATFORM_LEN = 1.2
_HURDLE_WIDTH = 0.3
_STAIR_FLIGHT = 4          # steps up, then the same number down
_END_RUNOUT = 1.5


@dataclass(frozen=True)
class TerrainParams:
    """Obstacle geometry for one (kind, level)."""

    gap_width: float
    gap_depth: float
    step_height: float
    hurdle_height: float
    stair_rise: float
    stair_run: float
    n_features: int

    def as_tuple(self) -> tuple[float, ...]:
        return (self.gap_width, self.gap_depth, self.step_height,
                self.hurdle_height, self.stair_rise, self.stair_run,
                float(self.n_features))


@dataclass(frozen=True)
class HeightField:
    """Elevation grid over a track; node (i, j) sits at (i*res, j*res)."""

    resolution: float
    extent_x: float
    extent_y: float
    heights: np.ndarray          # (nx, ny) float64, meters
    track_kind: str
    level: int
    seed: int

    @property
    def nx(self) -> int:
        return self.heights.shape[0]

    @property
    def ny(self) -> int:
        return self.heights.shape[1]


def _check_kind_level(kind: str, level: int) -> None:
    if kind not in TRACK_KINDS:
        raise ValueError(f"unknown track kind {kind!r}; expected one of {TRACK_KINDS}")
    if not (1 <= int(level) <= MAX_LEVEL):
        raise ValueError(f"level must be in 1..{MAX_LEVEL}, got {level}")


def _lerp(lo: float, hi: float, level: int) -> float:
    return lo + (hi - lo) * (level - 1) / (MAX_LEVEL - 1)


def difficulty_params(kind: str, level: int,
                      cfg: TerrainConfig = TerrainConfig()) -> TerrainParams:
    """Deterministic per-level obstacle geometry (linear level schedule)."""
    _check_kind_level(kind, level)
    t = cfg
    return TerrainParams(
        gap_width=_lerp(t.gap_width_min, t.gap_width_max, level),
        gap_depth=_lerp(t.gap_depth_min, t.gap_depth_max, level),
        step_height=_lerp(t.step_height_min, t.step_height_max, level),
        hurdle_height=_lerp(t.hurdle_height_min, t.hurdle_height_max, level),
        stair_rise=_lerp(t.stair_rise_min, t.stair_rise_max, level),
        stair_run=t.stair_run,
        n_features=t.n_features,
    )


def _feature_rng(seed: int, kind: str, level: int, randomize: bool) -> np.random.Generator:
    entropy = [seed & 0xFFFFFFFFFFFFFFFF, TRACK_KINDS.index(kind), level, int(randomize)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _jitter(rng: np.random.Generator, nominal: float, frac: float,
            upper: float, randomize: bool) -> float:
    if not randomize:
        return nominal
    scale = rng.uniform(1.0 - frac, 1.0 + frac)
    return min(nominal * scale, upper)


def generate_track(kind: str, level: int, seed: int, randomize: bool,
                   cfg: TerrainConfig = TerrainConfig()) -> HeightField:
    """Build one curriculum track.

    The track grows beyond ``cfg.extent_x`` when the configured feature
    count does not fit (high-level stairs need the room); the spawn pad and
    a flat runout at the end are always preserved.
    """
    _check_kind_level(kind, level)
    params = difficulty_params(kind, level, cfg)
    rng = _feature_rng(seed, kind, level, randomize)
    res = cfg.resolution

    # Per-feature realized sizes, jittered independently per feature.
    features: list[tuple[float, float]] = []   # (extent_x, magnitude)
    depths: list[float] = []
    for _ in range(cfg.n_features if kind != "flat" else 0):
        if kind == "gap":
            w = _jitter(rng, params.gap_width, cfg.jitter_frac, cfg.gap_width_max, randomize)
            d = _jitter(rng, params.gap_depth, cfg.jitter_frac, cfg.gap_depth_max, randomize)
            features.append((w, d))
            depths.append(d)
        elif kind == "step":
            h = _jitter(rng, params.step_height, cfg.jitter_frac, cfg.step_height_max, randomize)
            features.append((_STEP_PLATFORM_LEN, h))
        elif kind == "hurdle":
            h = _jitter(rng, params.hurdle_height, cfg.jitter_frac, cfg.hurdle_height_max, randomize)
            features.append((_HURDLE_WIDTH, h))
        elif kind == "stairs":
            r = _jitter(rng, params.stair_rise, cfg.jitter_frac, cfg.stair_rise_max, randomize)
            features.append((2 * _STAIR_FLIGHT * params.stair_run, r))

    x0 = cfg.spawn_pad + 0.5
    total = x0 + sum(f[0] for f in features)
    if features:
        total += (len(features) - 1) * cfg.feature_spacing
    total += _END_RUNOUT
    extent_x = max(cfg.extent_x, math.ceil(total / res) * res)

    nx = math.ceil(extent_x / res)
    ny = math.ceil(cfg.extent_y / res)
    heights = np.zeros((nx, ny), dtype=np.float64)
    xs = np.arange(nx) * res

    cursor = x0
    for ext, mag in features:
        if kind == "gap":
            mask = (xs >= cursor) & (xs < cursor + ext)
            heights[mask, :] = -mag
        elif kind in ("step", "hurdle"):
            mask = (xs >= cursor) & (xs < cursor + ext)
            heights[mask, :] = mag
        elif kind == "stairs":
            run = ext / (2 * _STAIR_FLIGHT)
            for s in range(_STAIR_FLIGHT):
                lo = cursor + s * run
                mask = (xs >= lo) & (xs < lo + run)
                heights[mask, :] = (s + 1) * mag
            for s in range(_STAIR_FLIGHT):
                lo = cursor + (_STAIR_FLIGHT + s) * run
                mask = (xs >= lo) & (xs < lo + run)
                heights[mask, :] = (_STAIR_FLIGHT - 1 - s) * mag
        cursor += ext + cfg.feature_spacing

    np.clip(heights, -MAX_ABS_HEIGHT, MAX_ABS_HEIGHT, out=heights)
    heights.setflags(write=False)
    return HeightField(resolution=res, extent_x=extent_x, extent_y=cfg.extent_y,
                       heights=heights, track_kind=kind, level=int(level), seed=int(seed))


def height_at(field: HeightField, x, y):
    """Bilinear elevation lookup; accepts scalars or matching arrays."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(x < -1e-9) or np.any(x > field.extent_x + 1e-9) \
            or np.any(y < -1e-9) or np.any(y > field.extent_y + 1e-9):
        raise ValueError("query outside terrain extent")
    return _bilinear(field.heights, x / field.resolution, y / field.resolution)


def _bilinear(grid: np.ndarray, tx, ty):
    """Interpolate grid at fractional node coordinates, clamped to the grid."""
    nx, ny = grid.shape[-2], grid.shape[-1]
    ix = np.clip(np.floor(tx).astype(np.int64), 0, nx - 2)
    iy = np.clip(np.floor(ty).astype(np.int64), 0, ny - 2)
    fx = np.clip(tx - ix, 0.0, 1.0)
    fy = np.clip(ty - iy, 0.0, 1.0)
    if grid.ndim == 2:
        h00 = grid[ix, iy]
        h10 = grid[ix + 1, iy]
        h01 = grid[ix, iy + 1]
        h11 = grid[ix + 1, iy + 1]
    else:  # leading batch axis, one grid per row of queries
        b = np.arange(grid.shape[0])
        b = b.reshape((-1,) + (1,) * (np.ndim(ix) - 1)) if np.ndim(ix) > 1 else b
        h00 = grid[b, ix, iy]
        h10 = grid[b, ix + 1, iy]
        h01 = grid[b, ix, iy + 1]
        h11 = grid[b, ix + 1, iy + 1]
    top = h00 * (1 - fx) + h10 * fx
    bot = h01 * (1 - fx) + h11 * fx
    return top * (1 - fy) + bot * fy


def curriculum_update(level: int, traversed_frac: float,
                      cfg: TerrainConfig = TerrainConfig()) -> int:
    """Promote/demote a per-env difficulty level from the episode outcome."""
    if traversed_frac >= cfg.promote_frac:
        return min(level + 1, MAX_LEVEL)
    if traversed_frac < cfg.demote_frac:
        return max(level - 1, 1)
    return level


def measure_gap_spans(field: HeightField, min_depth: float = 0.01) -> list[tuple[float, float]]:
    """Scan the centerline for zero-support spans (terrain below -min_depth).

    Independent of the generator's bookkeeping; used to verify that realized
    gap widths match requested parameters.
    """
    mid = field.ny // 2
    below = field.heights[:, mid] < -min_depth
    spans = []
    start = None
    for i, flag in enumerate(below):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            spans.append((start * field.resolution, i * field.resolution))
            start = None
    if start is not None:
        spans.append((start * field.resolution, field.nx * field.resolution))
    return spans


def save_binary(field: HeightField, path: str | Path) -> None:
    """Versioned binary grid: magic, version, dims, metadata, float32 rows."""
    header = struct.pack(
        "<4sIIIdddBBxxq",
        _BINARY_MAGIC, _BINARY_VERSION, field.nx, field.ny,
        field.resolution, field.extent_x, field.extent_y,
        TRACK_KINDS.index(field.track_kind), field.level, field.seed,
    )
    data = field.heights.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + data)


def load_binary(path: str | Path) -> HeightField:
    raw = Path(path).read_bytes()
    head_size = struct.calcsize("<4sIIIdddBBxxq")
    magic, version, nx, ny, res, ex, ey, kind_id, level, seed = struct.unpack(
        "<4sIIIdddBBxxq", raw[:head_size])
    if magic != _BINARY_MAGIC:
        raise ValueError(f"not a height-field file (magic {magic!r})")
    if version != _BINARY_VERSION:
        raise ValueError(f"unsupported height-field version {version}")
    heights = np.frombuffer(raw[head_size:], dtype="<f4").reshape(nx, ny).astype(np.float64)
    heights.setflags(write=False)
    return HeightField(resolution=res, extent_x=ex, extent_y=ey, heights=heights,
                       track_kind=TRACK_KINDS[kind_id], level=level, seed=seed)


def save_csv(field: HeightField, path: str | Path, meta: str = "") -> None:
    """Long-format CSV (x, y, height) for plotting."""
    lines = [f"# kind={field.track_kind} level={field.level} seed={field.seed} {meta}".rstrip(),
             "x,y,height"]
    res = field.resolution
    for i in range(field.nx):
        for j in range(field.ny):
            lines.append(f"{i * res:.6g},{j * res:.6g},{field.heights[i, j]:.6g}")
    Path(path).write_text("\n".join(lines) + "\n")
