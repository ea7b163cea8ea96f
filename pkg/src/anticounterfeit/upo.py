"""Synthetic unreproducible physical objects (UPOs).

A banknote patch is sprinkled with randomly placed metal flecks of several
types.  The scatter is the object's identity: it is cheap to manufacture a new
one and infeasible to manufacture a copy of an existing one.  A sensor reads
two channels off the patch: a magnetic response grid and a backlit optical
transmission grid.  Both channels together form the :class:`Fingerprint`.

Approximation attacks (:class:`PrintedInk`, :class:`CandyBar`) only ever see a
measured fingerprint, never the fleck map behind it, and produce a
:class:`Forgery` that can be measured like a real note.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence, Union

import numpy as np

FORMAT_VERSION = 1
CHANNELS = ("magnetic", "optical")

# Midpoint of the genuine/impostor gap from collision_study(n=1000) at default
# parameters; see docs/calibration.md.
DEFAULT_THRESHOLD = 0.66

# Uniform coverage of the continuous magnetic-ink layer a printed forgery needs.
INK_LAYER_COVERAGE = 0.35


class ParamsInvalid(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class NoSeparation(RuntimeError):
    """Genuine and impostor similarity distributions overlap."""

    def __init__(self, report: "CollisionReport"):
        super().__init__(
            f"no separation: genuine_min={report.genuine_min:.6f} "
            f"<= impostor_max={report.impostor_max:.6f}"
        )
        self.report = report


@dataclass(frozen=True)
class MetalSpec:
    name: str
    susceptibility: float
    opacity: float


DEFAULT_CATALOG = (
    MetalSpec("iron", 1.00, 0.92),
    MetalSpec("cobalt", 0.81, 0.90),
    MetalSpec("nickel", 0.63, 0.88),
    MetalSpec("copper", 0.34, 0.85),
    MetalSpec("silver", 0.22, 0.95),
    MetalSpec("gold", 0.12, 0.97),
)


@dataclass(frozen=True)
class FabricationParams:
    fleck_count_range: tuple[int, int] = (150, 250)
    metal_catalog: tuple[MetalSpec, ...] = DEFAULT_CATALOG
    size_range_um: tuple[float, float] = (50.0, 150.0)
    region_mm: tuple[float, float] = (10.0, 10.0)
    rng_seed: int | None = None

    def validate(self) -> None:
        lo, hi = self.fleck_count_range
        if lo < 1 or hi < lo:
            raise ParamsInvalid(f"fleck_count_range must satisfy 1 <= min <= max, got {self.fleck_count_range}")
        if not self.metal_catalog:
            raise ParamsInvalid("metal catalog is empty")
        sus = [m.susceptibility for m in self.metal_catalog]
        if len(set(sus)) != len(sus):
            raise ParamsInvalid("metal susceptibilities must be pairwise distinct")
        for m in self.metal_catalog:
            if not m.susceptibility > 0:
                raise ParamsInvalid(f"{m.name}: susceptibility must be > 0")
            if not 0.0 <= m.opacity <= 1.0:
                raise ParamsInvalid(f"{m.name}: opacity must lie in [0, 1]")
        smin, smax = self.size_range_um
        if smin <= 0 or smax < smin:
            raise ParamsInvalid(f"size_range_um must satisfy 0 < min <= max, got {self.size_range_um}")
        w, h = self.region_mm
        if w <= 0 or h <= 0:
            raise ParamsInvalid("region must have positive width and height")


@dataclass(frozen=True)
class SensorParams:
    grid_size: int = 16
    point_spread_mm: float = 0.3
    noise_sigma_rel: float = 0.02
    rng_seed: int | None = None

    def validate(self) -> None:
        if self.grid_size < 4:
            raise ParamsInvalid("grid_size must be >= 4")
        if not self.point_spread_mm > 0:
            raise ParamsInvalid("point_spread_mm must be > 0")
        if self.noise_sigma_rel < 0:
            raise ParamsInvalid("noise_sigma_rel must be >= 0")


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FleckMap:
    """Ground-truth fleck scatter of one physical note patch."""

    width_mm: float
    height_mm: float
    positions: np.ndarray  # (n, 2) in mm
    metal_index: np.ndarray  # (n,) index into catalog
    sizes_um: np.ndarray  # (n,)
    catalog: tuple[MetalSpec, ...] = DEFAULT_CATALOG

    def __post_init__(self):
        object.__setattr__(self, "positions", _frozen(self.positions).reshape(-1, 2))
        object.__setattr__(self, "metal_index", _frozen(self.metal_index, dtype=np.int64))
        object.__setattr__(self, "sizes_um", _frozen(self.sizes_um))
        n = len(self.positions)
        if len(self.metal_index) != n or len(self.sizes_um) != n:
            raise ParamsInvalid("fleck arrays must have equal length")
        if n and (self.positions.min() < 0
                  or self.positions[:, 0].max() > self.width_mm
                  or self.positions[:, 1].max() > self.height_mm):
            raise ParamsInvalid("fleck outside region")

    def __len__(self) -> int:
        return len(self.positions)

    def __eq__(self, other):
        if not isinstance(other, FleckMap):
            return NotImplemented
        return (
            (self.width_mm, self.height_mm, self.catalog) == (other.width_mm, other.height_mm, other.catalog)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.metal_index, other.metal_index)
            and np.array_equal(self.sizes_um, other.sizes_um)
        )

    __hash__ = None

    @property
    def region_mm(self) -> tuple[float, float]:
        return (self.width_mm, self.height_mm)

    def magnetic_sources(self) -> tuple[np.ndarray, np.ndarray]:
        sus = np.array([m.susceptibility for m in self.catalog])
        return self.positions, sus[self.metal_index] * self.sizes_um**2

    def optical_sources(self) -> tuple[np.ndarray, np.ndarray]:
        opacity = np.array([m.opacity for m in self.catalog])
        return self.positions, opacity[self.metal_index]

    base_coverage = 0.0


@dataclass(frozen=True, eq=False)
class Forgery:
    """An approximation of a note, built from a fingerprint rather than from matter."""

    kind: str
    width_mm: float
    height_mm: float
    magnetic_positions: np.ndarray
    magnetic_strengths: np.ndarray
    optical_positions: np.ndarray
    optical_weights: np.ndarray
    base_coverage: float = 0.0

    def magnetic_sources(self):
        return self.magnetic_positions, self.magnetic_strengths

    def optical_sources(self):
        return self.optical_positions, self.optical_weights


Measurable = Union[FleckMap, Forgery]


def _quantize(values) -> np.ndarray:
    flat = np.asarray(values, dtype=float).ravel()
    out = np.fromiter((float(format(v, ".9g")) for v in flat.tolist()), dtype=float, count=flat.size)
    return out.reshape(np.shape(values))


@dataclass(frozen=True, eq=False)
class Fingerprint:
    """Two-channel sensor readout.

    Values are held at 9 significant digits so that the text encoding
    round-trips bit-exactly.
    """

    magnetic_grid: np.ndarray
    optical_grid: np.ndarray

    def __post_init__(self):
        mag = np.asarray(self.magnetic_grid, dtype=float)
        opt = np.asarray(self.optical_grid, dtype=float)
        if mag.ndim != 2 or mag.shape[0] != mag.shape[1] or mag.shape != opt.shape:
            raise ShapeMismatch(f"grids must be equal square matrices, got {mag.shape} and {opt.shape}")
        if not (np.isfinite(mag).all() and np.isfinite(opt).all()):
            raise ValueError("fingerprint values must be finite")
        if (mag < 0).any():
            raise ValueError("magnetic responses must be non-negative")
        if (opt < 0).any() or (opt > 1).any():
            raise ValueError("optical transmission must lie in [0, 1]")
        object.__setattr__(self, "magnetic_grid", _frozen(_quantize(mag)))
        object.__setattr__(self, "optical_grid", _frozen(_quantize(opt)))

    @property
    def grid_size(self) -> int:
        return self.magnetic_grid.shape[0]

    def channel(self, name: str) -> np.ndarray:
        if name == "magnetic":
            return self.magnetic_grid
        if name == "optical":
            return self.optical_grid
        raise ValueError(f"unknown channel {name!r}")

    def __eq__(self, other):
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return (np.array_equal(self.magnetic_grid, other.magnetic_grid)
                and np.array_equal(self.optical_grid, other.optical_grid))

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "grid_size": self.grid_size,
            "magnetic_grid": self.magnetic_grid.ravel().tolist(),
            "optical_grid": self.optical_grid.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Fingerprint":
        try:
            version = data["format_version"]
            g = int(data["grid_size"])
            mag = np.asarray(data["magnetic_grid"], dtype=float)
            opt = np.asarray(data["optical_grid"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed fingerprint: {exc}") from None
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported fingerprint format_version {version!r}")
        if mag.size != g * g or opt.size != g * g:
            raise ShapeMismatch(f"grid_size {g} does not match {mag.size} / {opt.size} values")
        return cls(mag.reshape(g, g), opt.reshape(g, g))

    def encode(self) -> str:
        """Canonical text form: one JSON object, values at 9 significant digits."""

        def arr(a):
            return "[" + ",".join(format(v, ".9g") for v in a.ravel().tolist()) + "]"

        return (
            f'{{"format_version":{FORMAT_VERSION},"grid_size":{self.grid_size},'
            f'"magnetic_grid":{arr(self.magnetic_grid)},"optical_grid":{arr(self.optical_grid)}}}'
        )

    @classmethod
    def decode(cls, text: str) -> "Fingerprint":
        return cls.from_dict(json.loads(text))


def fabricate(params: FabricationParams) -> FleckMap:
    params.validate()
    rng = np.random.default_rng(params.rng_seed)
    lo, hi = params.fleck_count_range
    n = int(rng.integers(lo, hi, endpoint=True))
    w, h = params.region_mm
    positions = rng.uniform((0.0, 0.0), (w, h), size=(n, 2))
    metals = rng.integers(0, len(params.metal_catalog), size=n)
    sizes = rng.uniform(*params.size_range_um, size=n)
    return FleckMap(w, h, positions, metals, sizes, tuple(params.metal_catalog))


@lru_cache(maxsize=32)
def _cell_centers(grid_size: int, width_mm: float, height_mm: float) -> np.ndarray:
    xs = (np.arange(grid_size) + 0.5) * (width_mm / grid_size)
    ys = (np.arange(grid_size) + 0.5) * (height_mm / grid_size)
    # row-major: row index follows y
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    centers = np.column_stack([xx.ravel(), yy.ravel()])
    centers.setflags(write=False)
    return centers


def _kernel(points: np.ndarray, sources: np.ndarray, spread_mm: float) -> np.ndarray:
    if len(sources) == 0:
        return np.zeros((len(points), 0))
    # elementwise, so each entry depends only on its own pair of points
    diff = points[:, None, :] - sources[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    return np.exp(-d2 / (2.0 * spread_mm**2))


def _superpose(kernel: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # Left-to-right summation in source order: adding a source can then never
    # lower a cell through rounding, which a blocked matmul does not guarantee.
    if kernel.shape[1] == 0:
        return np.zeros(kernel.shape[0])
    return np.cumsum(kernel * np.asarray(weights, dtype=float), axis=1)[:, -1]


def noiseless_response(obj: Measurable, sensor: SensorParams) -> tuple[np.ndarray, np.ndarray]:
    """Return (magnetic, optical) grids before sensor noise."""
    g = sensor.grid_size
    centers = _cell_centers(g, float(obj.width_mm), float(obj.height_mm))
    mpos, mstr = obj.magnetic_sources()
    opos, owt = obj.optical_sources()
    mag = _superpose(_kernel(centers, mpos, sensor.point_spread_mm), mstr)
    coverage = _superpose(_kernel(centers, opos, sensor.point_spread_mm), owt) + obj.base_coverage
    opt = 1.0 - np.clip(coverage, 0.0, 1.0)
    return mag.reshape(g, g), opt.reshape(g, g)


def measure(obj: Measurable, sensor: SensorParams) -> Fingerprint:
    sensor.validate()
    mag, opt = noiseless_response(obj, sensor)
    if sensor.noise_sigma_rel > 0:
        rng = np.random.default_rng(sensor.rng_seed)
        mag = mag * (1.0 + rng.normal(0.0, sensor.noise_sigma_rel, mag.shape))
        opt = opt * (1.0 + rng.normal(0.0, sensor.noise_sigma_rel, opt.shape))
    return Fingerprint(np.maximum(mag, 0.0), np.clip(opt, 0.0, 1.0))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = x.ravel()
    y = y.ravel()
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.abs(xc).max())
    sy = float(np.abs(yc).max())
    x_const = np.ptp(x) == 0 or sx == 0
    y_const = np.ptp(y) == 0 or sy == 0
    if x_const or y_const:
        return 1.0 if (x_const and y_const and x[0] == y[0]) else 0.0
    # rescale so the sums of squares cannot underflow
    xc = xc / sx
    yc = yc / sy
    r = float(xc @ yc) / math.sqrt(float(xc @ xc) * float(yc @ yc))
    return min(1.0, max(-1.0, r))


def similarity(a: Fingerprint, b: Fingerprint, channels: Sequence[str] = CHANNELS) -> float:
    """Mean per-channel Pearson correlation, in [-1, 1]."""
    if a.grid_size != b.grid_size:
        raise ShapeMismatch(f"grid sizes differ: {a.grid_size} vs {b.grid_size}")
    return sum(_pearson(a.channel(c), b.channel(c)) for c in channels) / len(channels)


def match(a: Fingerprint, b: Fingerprint, threshold: float, channels: Sequence[str] = CHANNELS) -> bool:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return similarity(a, b, channels) >= threshold


@dataclass
class CollisionReport:
    n: int
    genuine_min: float
    impostor_max: float
    suggested_threshold: float | None
    empirical_far: float | None
    empirical_frr: float | None
    genuine_pairs: int
    impostor_pairs: int
    channels: tuple[str, ...] = CHANNELS
    genuine_scores: np.ndarray = field(default=None, repr=False)
    impostor_scores: np.ndarray = field(default=None, repr=False)

    @property
    def gap(self) -> float:
        return self.genuine_min - self.impostor_max

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "channels": list(self.channels),
            "genuine_pairs": self.genuine_pairs,
            "impostor_pairs": self.impostor_pairs,
            "genuine_min": self.genuine_min,
            "impostor_max": self.impostor_max,
            "suggested_threshold": self.suggested_threshold,
            "empirical_far": self.empirical_far,
            "empirical_frr": self.empirical_frr,
        }


def _seeds(seed: int | None, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _standardized(grids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rows scaled so that a dot product gives the Pearson coefficient."""
    centered = grids - grids.mean(axis=1, keepdims=True)
    scale = np.abs(centered).max(axis=1, keepdims=True)
    const = (np.ptp(grids, axis=1) == 0) | (scale[:, 0] == 0)
    scale[const] = 1.0
    centered = centered / scale
    norms = np.sqrt((centered**2).sum(axis=1))
    norms[const] = 1.0
    z = centered / norms[:, None]
    z[const] = 0.0
    return z, const, grids[:, 0]


def _pairwise_channel(grids: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    z, const, first = _standardized(grids)
    r = np.einsum("ij,ij->i", z[rows], z[cols])
    both = const[rows] & const[cols]
    r[both] = (first[rows] == first[cols])[both].astype(float)
    return np.clip(r, -1.0, 1.0)


def collision_study(
    n: int,
    fab: FabricationParams = FabricationParams(),
    sensor: SensorParams = SensorParams(),
    impostor_budget: int | None = None,
    channels: Sequence[str] = CHANNELS,
) -> CollisionReport:
    """Fabricate ``n`` notes, measure each twice, and compare score distributions.

    Genuine pairs are the two measurements of each note; impostor pairs are
    first measurements of distinct notes (all of them, or a uniform sample of
    ``impostor_budget``).  The suggested threshold is the midpoint of the gap
    between the distributions; :class:`NoSeparation` is raised if there is none.
    """
    if n < 100:
        raise ValueError("collision_study needs n >= 100")
    fab.validate()
    sensor.validate()
    channels = tuple(channels)
    fab_seeds = _seeds(fab.rng_seed, n)
    sensor_seeds = _seeds(sensor.rng_seed, 2 * n)
    first, second = [], []
    for i in range(n):
        note = fabricate(replace(fab, rng_seed=fab_seeds[i]))
        first.append(measure(note, replace(sensor, rng_seed=sensor_seeds[2 * i])))
        second.append(measure(note, replace(sensor, rng_seed=sensor_seeds[2 * i + 1])))

    genuine = np.array([similarity(a, b, channels) for a, b in zip(first, second)])

    rows, cols = np.triu_indices(n, k=1)
    if impostor_budget is not None and impostor_budget < len(rows):
        pick = np.random.default_rng(fab.rng_seed).choice(len(rows), size=impostor_budget, replace=False)
        rows, cols = rows[pick], cols[pick]
    impostor = np.zeros(len(rows))
    for c in channels:
        grids = np.stack([fp.channel(c).ravel() for fp in first])
        impostor += _pairwise_channel(grids, rows, cols)
    impostor /= len(channels)

    report = CollisionReport(
        n=n,
        genuine_min=float(genuine.min()),
        impostor_max=float(impostor.max()),
        suggested_threshold=None,
        empirical_far=None,
        empirical_frr=None,
        genuine_pairs=len(genuine),
        impostor_pairs=len(impostor),
        channels=channels,
        genuine_scores=genuine,
        impostor_scores=impostor,
    )
    if report.genuine_min <= report.impostor_max:
        raise NoSeparation(report)
    tau = (report.genuine_min + report.impostor_max) / 2.0
    report.suggested_threshold = tau
    report.empirical_far = float((impostor >= tau).mean())
    report.empirical_frr = float((genuine < tau).mean())
    return report


# --- approximation attacks -------------------------------------------------


@dataclass(frozen=True)
class PrintedInk:
    """Magnetic-ink print of the target's magnetic map.

    The ink must form a continuous layer to be printed, so the backlit image of
    the forgery has no gaps.  With ``magnetic_only=False`` the forger also
    overprints a halftone of the target's backlit scan on that layer.
    """

    resolution_dpi: float
    magnetic_only: bool = True

    def __post_init__(self):
        if not self.resolution_dpi > 0:
            raise ValueError("resolution_dpi must be > 0")


@dataclass(frozen=True)
class CandyBar:
    """Wafer sliced from a bar assembled to mimic the target's metal layout."""

    slice_fidelity: float

    def __post_init__(self):
        if not 0.0 <= self.slice_fidelity <= 1.0:
            raise ValueError("slice_fidelity must lie in [0, 1]")


Attack = Union[PrintedInk, CandyBar]


@lru_cache(maxsize=64)
def _fit_system(grid_size: int, width_mm: float, height_mm: float, spread_mm: float,
                pitch_mm: float | None) -> tuple[np.ndarray, np.ndarray, float]:
    """Kernel from source dots to cell centers, the dots, and a safe gradient step.

    Dots sit on the cell centers, snapped to a print raster of ``pitch_mm``
    when one is given.
    """
    centers = _cell_centers(grid_size, width_mm, height_mm)
    dots = centers
    if pitch_mm is not None:
        dots = np.clip(np.round(centers / pitch_mm) * pitch_mm, 0.0, [width_mm, height_mm])
    a = _kernel(centers, dots, spread_mm)
    step = 1.0 / np.linalg.norm(a, 2) ** 2
    for arr in (a, dots):
        arr.setflags(write=False)
    return a, dots, step


def _fit_sources(a: np.ndarray, step: float, targets: np.ndarray, iterations: int = 100) -> np.ndarray:
    """Non-negative source strengths x minimizing ||Ax - targets||^2.

    Accelerated projected gradient.  The kernels used here are well
    conditioned, so a fixed iteration budget converges far below sensor noise.
    """
    x = np.zeros(a.shape[1])
    y = x.copy()
    t = 1.0
    for _ in range(iterations):
        x_next = np.maximum(y - step * (a.T @ (a @ y - targets)), 0.0)
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        y = x_next + ((t - 1.0) / t_next) * (x_next - x)
        x, t = x_next, t_next
    return x


def approximate_clone(
    target: Fingerprint,
    attack: Attack,
    rng: np.random.Generator | int | None = None,
    sensor: SensorParams = SensorParams(),
    fab: FabricationParams = FabricationParams(),
) -> Forgery:
    """Build a forgery approximating ``target``.

    ``sensor`` is what the forger knows about the verifier's reader and
    ``fab`` what they know about genuine notes (region, fleck density).
    """
    rng = np.random.default_rng(rng)
    w, h = (float(v) for v in fab.region_mm)
    g = target.grid_size
    spread = float(sensor.point_spread_mm)
    mag_target = target.magnetic_grid.ravel()

    if isinstance(attack, PrintedInk):
        a, dots, step = _fit_system(g, w, h, spread, 25.4 / attack.resolution_dpi)
        strengths = _fit_sources(a, step, mag_target)
        opt_pos = np.zeros((0, 2))
        opt_wt = np.zeros(0)
        if not attack.magnetic_only:
            needed = np.clip(1.0 - target.optical_grid.ravel() - INK_LAYER_COVERAGE, 0.0, None)
            opt_pos = dots
            opt_wt = _fit_sources(a, step, needed)
        return Forgery("printed_ink", w, h, dots, strengths, opt_pos, opt_wt, INK_LAYER_COVERAGE)

    if isinstance(attack, CandyBar):
        a, centers, step = _fit_system(g, w, h, spread, None)
        strengths = _fit_sources(a, step, mag_target)
        slack = 1.0 - attack.slice_fidelity
        pitch = w / g
        pos = np.clip(centers + rng.normal(0.0, slack * pitch, centers.shape), 0.0, [w, h])
        strengths = np.maximum(strengths * (1.0 + rng.normal(0.0, slack, strengths.shape)), 0.0)
        # the slice's own gap pattern comes from how the bar was packed, not from the target
        filler = fabricate(replace(fab, rng_seed=int(rng.integers(2**63))))
        opt_pos, opt_wt = filler.optical_sources()
        return Forgery("candy_bar", w, h, pos, strengths, np.array(opt_pos), np.array(opt_wt), 0.0)

    raise TypeError(f"unknown attack {attack!r}")
