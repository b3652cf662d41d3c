"""Domain types shared by every module: samples, evaluation regions, fold
plans and the seeding policy."""

from __future__ import annotations

import csv
import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, InvalidPlanError

MAX_EVAL_DIM = 3


@dataclass(frozen=True)
class ObservationBatch:
    """An i.i.d. sample ``Z = (X, A, Y)``.

    ``ids`` is optional bookkeeping used to detect overlap between a
    reference pool and a working sample.
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    labels: tuple = (0, 1)
    ids: np.ndarray | None = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        a = np.asarray(self.a).astype(int).ravel()
        if x.shape[0] != a.shape[0] or y.shape[0] != a.shape[0]:
            raise ValueError(
                f"row counts disagree: x={x.shape[0]}, a={a.shape[0]}, y={y.shape[0]}"
            )
        if a.shape[0] < 1:
            raise ValueError("batch needs at least one unit")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("non-finite entries in x or y")
        bad = np.setdiff1d(np.unique(a), np.asarray(self.labels, dtype=int))
        if bad.size:
            raise ValueError(f"treatment labels {bad.tolist()} not in {self.labels}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        if self.ids is not None:
            object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]

    @property
    def d(self) -> int:
        return self.y.shape[1]

    def arm_mask(self, arm: int) -> np.ndarray:
        return self.a == arm

    def subset(self, index) -> "ObservationBatch":
        index = np.asarray(index)
        return ObservationBatch(
            self.x[index],
            self.a[index],
            self.y[index],
            labels=self.labels,
            ids=None if self.ids is None else self.ids[index],
        )

    def projected(self, projection: np.ndarray | None) -> "ObservationBatch":
        """Batch whose outcomes are mapped to evaluation coordinates."""
        if projection is None:
            return self
        return ObservationBatch(
            self.x, self.a, self.y @ np.asarray(projection).T, labels=self.labels, ids=self.ids
        )


def write_batch_csv(batch: ObservationBatch, path) -> None:
    header = [f"x{j}" for j in range(batch.k)] + ["a"] + [f"y{j}" for j in range(batch.d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(batch.n):
            row = [repr(float(v)) for v in batch.x[i]]
            row.append(str(int(batch.a[i])))
            row.extend(repr(float(v)) for v in batch.y[i])
            writer.writerow(row)


def read_batch_csv(path, labels: Sequence[int] = (0, 1)) -> ObservationBatch:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    if "a" not in header:
        raise ConfigError(f"{path}: header lacks treatment column 'a'", key="a")
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    ycols = [i for i, h in enumerate(header) if h.startswith("y")]
    acol = header.index("a")
    data = np.array(rows, dtype=float)
    return ObservationBatch(data[:, xcols], data[:, acol], data[:, ycols], labels=labels)


@dataclass(frozen=True)
class EvaluationRegion:
    lower: np.ndarray
    upper: np.ndarray
    grid_points_per_axis: int
    projection: np.ndarray | None = None

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ConfigError("lower and upper must be vectors of equal length", key="lower")
        if not np.all(lower < upper):
            raise ConfigError("lower must be < upper componentwise", key="upper")
        if lower.size > MAX_EVAL_DIM:
            raise ConfigError(
                f"evaluation dimension {lower.size} exceeds the cap of {MAX_EVAL_DIM}; "
                "supply a projection",
                key="projection",
            )
        if int(self.grid_points_per_axis) < 2:
            raise ConfigError("grid_points_per_axis must be >= 2", key="grid_points_per_axis")
        proj = self.projection
        if proj is not None:
            proj = np.atleast_2d(np.asarray(proj, dtype=float))
            if proj.shape[0] != lower.size:
                raise ConfigError(
                    f"projection has {proj.shape[0]} rows, expected {lower.size}", key="projection"
                )
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "grid_points_per_axis", int(self.grid_points_per_axis))
        object.__setattr__(self, "projection", proj)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def project(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(y)
        return y if self.projection is None else y @ self.projection.T

    @classmethod
    def bounding_box(cls, y, grid_points_per_axis, margin=0.1, projection=None):
        """Box over the (projected) sample expanded by ``margin`` of its width per side."""
        pts = np.atleast_2d(y)
        if projection is not None:
            pts = pts @ np.asarray(projection, dtype=float).T
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        width = np.where(hi > lo, hi - lo, 1.0)
        return cls(lo - margin * width, hi + margin * width, grid_points_per_axis, projection)

    def to_dict(self) -> dict:
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "grid_points_per_axis": self.grid_points_per_axis,
            "projection": None if self.projection is None else self.projection.tolist(),
        }


@dataclass(frozen=True, eq=False)
class Grid:
    """Tensor-product midpoint grid with quadrature weights."""

    points: np.ndarray
    weights: np.ndarray
    shape: tuple
    region: EvaluationRegion | None = None

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def interior_mask(self, fraction: float = 0.6) -> np.ndarray:
        """Points inside the central ``fraction`` of the box along every axis."""
        lo, hi = self.points.min(axis=0), self.points.max(axis=0)
        mid, half = (lo + hi) / 2, (hi - lo) / 2 * fraction
        return np.all(np.abs(self.points - mid) <= half + 1e-12, axis=1)


def make_grid(region: EvaluationRegion) -> Grid:
    m = region.grid_points_per_axis
    axes = []
    for lo, hi in zip(region.lower, region.upper):
        step = (hi - lo) / m
        axes.append(lo + step * (np.arange(m) + 0.5))
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([g.ravel() for g in mesh], axis=1)
    cell = float(np.prod((region.upper - region.lower) / m))
    weights = np.full(points.shape[0], cell)
    return Grid(points, weights, (m,) * region.dim, region)


def grid_from_points(points, weights=None) -> Grid:
    """Wrap arbitrary evaluation points (unit weights unless given)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if weights is None:
        weights = np.ones(points.shape[0])
    return Grid(points, np.asarray(weights, dtype=float), (points.shape[0],))


class SeedPolicy:
    """Named, independent random substreams derived from one master seed."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed) & (2**64 - 1)

    @staticmethod
    def _label_key(label: str) -> int:
        return zlib.crc32(label.encode("utf-8"))

    def seed_sequence(self, label: str, *index: int) -> np.random.SeedSequence:
        key = (self._label_key(label),) + tuple(int(i) for i in index)
        return np.random.SeedSequence(self.master_seed, spawn_key=key)

    def generator(self, label: str, *index: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_sequence(label, *index)))

    def child(self, label: str, *index: int) -> "SeedPolicy":
        """A new policy whose master seed is drawn from a labelled substream."""
        state = self.seed_sequence(label, *index).generate_state(2, dtype=np.uint32)
        return SeedPolicy(int(state[0]) << 32 | int(state[1]))

    def __repr__(self):
        return f"SeedPolicy({self.master_seed})"


def as_seed_policy(seed) -> SeedPolicy:
    return seed if isinstance(seed, SeedPolicy) else SeedPolicy(seed)


@dataclass(frozen=True)
class CrossFitPlan:
    n: int
    folds: int
    assignment: np.ndarray = field(repr=False)

    def test_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.folds)


def make_crossfit_plan(n: int, folds: int, seed) -> CrossFitPlan:
    """Balanced random partition of ``range(n)`` into ``folds`` parts."""
    if folds < 2:
        raise InvalidPlanError(f"need at least 2 folds, got {folds}", key="folds")
    if n < folds:
        raise InvalidPlanError(f"n={n} is smaller than folds={folds}", key="folds")
    rng = as_seed_policy(seed).generator("folds", n, folds)
    assignment = np.empty(n, dtype=int)
    assignment[rng.permutation(n)] = np.arange(n) % folds
    return CrossFitPlan(n, folds, assignment)


def parallel_map(fn: Callable, items: Iterable, workers: int = 1) -> list:
    """Ordered map over a thread pool; ``workers=1`` runs serially."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
