"""Synthetic datasets, client partitioning, CSV ingestion and mini-batch streams."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .numerics import InvalidInputError, RngStream

log = logging.getLogger(__name__)

TASKS = ("regression", "binary", "quadratic")
STRATEGIES = ("iid", "dirichlet", "task-split")


@dataclass(frozen=True)
class Dataset:
    """Rows of ``inputs`` (n x d_in) with matching ``targets`` (n,).

    ``groups`` labels the latent distribution each row was drawn from, and
    ``index`` holds the row ids in the dataset the rows were taken from.
    """

    inputs: np.ndarray
    targets: np.ndarray
    task: str = "regression"
    groups: Optional[np.ndarray] = None
    index: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if x.ndim != 2:
            raise InvalidInputError(f"inputs must be 2-D, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise InvalidInputError(f"targets shape {y.shape} does not match {x.shape[0]} rows")
        if x.shape[0] < 1:
            raise InvalidInputError("dataset must contain at least one row")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InvalidInputError("dataset contains non-finite values")
        if self.task not in TASKS:
            raise InvalidInputError(f"unknown task {self.task!r}")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        if self.index is None:
            object.__setattr__(self, "index", np.arange(x.shape[0]))
        if self.groups is None:
            object.__setattr__(self, "groups", np.zeros(x.shape[0], dtype=np.int64))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def take(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            self.inputs[rows],
            self.targets[rows],
            self.task,
            self.groups[rows],
            self.index[rows],
        )

    def labels(self) -> np.ndarray:
        """Discrete labels used for label-skew partitioning."""
        if self.task == "binary":
            return self.targets.astype(np.int64)
        if self.task == "regression":
            return (self.targets > np.median(self.targets)).astype(np.int64)
        return self.groups.astype(np.int64)


def concat(parts: list[Dataset]) -> Dataset:
    return Dataset(
        np.concatenate([p.inputs for p in parts]),
        np.concatenate([p.targets for p in parts]),
        parts[0].task,
        np.concatenate([p.groups for p in parts]),
        np.concatenate([p.index for p in parts]),
    )


# -- synthetic generation ---------------------------------------------------


def _teacher(rng: np.random.Generator, d: int, hidden: int = 16):
    u = rng.standard_normal((hidden, d)) / math.sqrt(d)
    b = 0.5 * rng.standard_normal(hidden)
    v = rng.standard_normal(hidden) / math.sqrt(hidden)
    return u, b, v


def gen_synthetic(
    task: str,
    n: int,
    d: int,
    *,
    seed: int,
    n_groups: int = 1,
    shift: float = 0.0,
    noise: float = 0.1,
    margin: float = 0.0,
    family: int = 0,
) -> Dataset:
    """Generate a reproducible synthetic dataset.

    Rows are split evenly over ``n_groups`` latent distributions.  ``shift``
    scales how far each group's input mean and labelling function drift from
    the shared base, so ``shift=0`` draws every row from one distribution.
    ``family`` alone fixes the base labelling function, so datasets drawn with
    different seeds from one family are related tasks; different families
    share nothing but their input dimension.
    """
    if task not in TASKS:
        raise InvalidInputError(f"unknown task {task!r}; expected one of {TASKS}")
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    if d < 1:
        raise InvalidInputError(f"d must be >= 1, got {d}")
    if n_groups < 1:
        raise InvalidInputError("n_groups must be >= 1")

    base = RngStream(seed, ("data", task, family))
    teacher_rng = RngStream(family, ("teacher", task, d)).generator()
    rows_rng = base.fork("rows").generator()

    groups = np.repeat(np.arange(n_groups), [len(c) for c in np.array_split(np.arange(n), n_groups)])
    drift_rng = base.fork("drift").generator()
    means = shift * drift_rng.standard_normal((n_groups, d)) / math.sqrt(d)

    x = rows_rng.standard_normal((n, d)) + means[groups]

    if task == "quadratic":
        offsets = noise * rows_rng.standard_normal((n, d)) + means[groups]
        return Dataset(offsets, np.zeros(n), task, groups)

    if task == "binary":
        w_star = teacher_rng.standard_normal(d)
        w_star /= np.linalg.norm(w_star)
        w_groups = w_star + shift * drift_rng.standard_normal((n_groups, d)) / math.sqrt(d)
        w_groups /= np.linalg.norm(w_groups, axis=1, keepdims=True)
        score = np.einsum("nd,nd->n", x, w_groups[groups])
        sign = np.where(score >= 0.0, 1.0, -1.0)
        if margin > 0:
            # push every row at least margin/2 away from its group's separator
            x = x + (sign * margin / 2)[:, None] * w_groups[groups]
        y = (sign > 0).astype(np.float64)
        return Dataset(x, y, task, groups)

    u, b, v = _teacher(teacher_rng, d)
    du = shift * drift_rng.standard_normal((n_groups,) + u.shape) / math.sqrt(d)
    h = np.tanh(np.einsum("nhd,nd->nh", u[None] + du[groups], x) + b)
    y = h @ v + noise * rows_rng.standard_normal(n)
    return Dataset(x, y, task, groups)


# -- partitioning -----------------------------------------------------------


@dataclass(frozen=True)
class PartitionSpec:
    strategy: str = "iid"
    m: int = 1
    seed: int = 0
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise InvalidInputError(f"unknown partition strategy {self.strategy!r}")
        if self.m < 1:
            raise InvalidInputError(f"client count m must be >= 1, got {self.m}")
        if self.strategy == "dirichlet" and not self.alpha > 0:
            raise InvalidInputError(f"dirichlet alpha must be > 0, got {self.alpha}")


def _fill_empty(shards: list[np.ndarray]) -> int:
    """Move one row from the largest shard into each empty one; return move count."""
    moves = 0
    for i, s in enumerate(shards):
        if len(s) == 0:
            donor = max(range(len(shards)), key=lambda j: (len(shards[j]), -j))
            if len(shards[donor]) < 2:
                raise InvalidInputError("not enough rows to give every client a nonempty shard")
            shards[i] = shards[donor][-1:]
            shards[donor] = shards[donor][:-1]
            moves += 1
    return moves


def partition(ds: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split ``ds`` into ``spec.m`` disjoint, nonempty shards covering every row.

    If a strategy leaves a shard empty, one row is moved from the largest
    shard; the number of such moves is recorded in ``shard.meta["fallback_moves"]``.
    """
    if ds.n < spec.m:
        raise InvalidInputError(f"cannot split {ds.n} rows over {spec.m} clients")
    if spec.m == 1:
        return [replace(ds, meta={"client": 0, "fallback_moves": 0})]

    rng = RngStream(spec.seed, ("partition", spec.strategy)).generator()
    m = spec.m
    if spec.strategy == "iid":
        perm = rng.permutation(ds.n)
        shards = list(np.array_split(perm, m))
    elif spec.strategy == "dirichlet":
        labels = ds.labels()
        buckets: list[list[np.ndarray]] = [[] for _ in range(m)]
        for c in np.unique(labels):
            idx = np.flatnonzero(labels == c)
            idx = idx[rng.permutation(len(idx))]
            props = rng.dirichlet(np.full(m, spec.alpha))
            cuts = (np.cumsum(props) * len(idx)).astype(np.int64)[:-1]
            for i, part in enumerate(np.split(idx, cuts)):
                buckets[i].append(part)
        shards = [np.sort(np.concatenate(b)) for b in buckets]
    else:
        group_ids = np.unique(ds.groups)
        if m < len(group_ids):
            raise InvalidInputError(f"task-split needs m >= number of groups ({len(group_ids)})")
        blocks = np.array_split(np.arange(m), len(group_ids))
        shards = [np.empty(0, dtype=np.int64)] * m
        for g, block in zip(group_ids, blocks):
            idx = np.flatnonzero(ds.groups == g)
            idx = idx[rng.permutation(len(idx))]
            for client, part in zip(block, np.array_split(idx, len(block))):
                shards[client] = part

    moves = _fill_empty(shards)
    if moves:
        log.warning("partition: %d empty shard(s) refilled from the largest shard", moves)
    out = []
    for i, rows in enumerate(shards):
        shard = ds.take(rows)
        out.append(replace(shard, meta={"client": i, "fallback_moves": moves}))
    return out


def label_tv_distance(shards: list[Dataset], n_classes: Optional[int] = None) -> float:
    """Mean total-variation distance between each shard's label histogram and the pooled one."""
    labels = [s.labels() for s in shards]
    k = n_classes or int(max(l.max() for l in labels)) + 1
    pooled = np.bincount(np.concatenate(labels), minlength=k) / sum(len(l) for l in labels)
    tv = [0.5 * np.abs(np.bincount(l, minlength=k) / len(l) - pooled).sum() for l in labels]
    return float(np.mean(tv))


# -- batches ----------------------------------------------------------------


class BatchStream:
    """Endless sequence of mini-batch row indices over a shard.

    Each epoch is a fresh permutation drawn from the stream's generator; the
    remainder batch of an epoch is kept.  When ``batch_size >= n`` every batch
    is the full shard in its stored order.
    """

    def __init__(self, n: int, batch_size: int, rng: RngStream):
        if batch_size < 1:
            raise InvalidInputError(f"batch_size must be >= 1, got {batch_size}")
        if batch_size > n:
            log.warning("batch_size %d exceeds shard size %d; using the full shard", batch_size, n)
            batch_size = n
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._gen = rng.generator()
        self._pending: list[np.ndarray] = []
        self.consumed = 0

    @property
    def full_batch(self) -> bool:
        return self.batch_size >= self.n

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.n / self.batch_size)

    def _refill(self) -> None:
        if self.full_batch:
            self._pending = [np.arange(self.n)]
            return
        perm = self._gen.permutation(self.n)
        self._pending = [perm[s : s + self.batch_size] for s in range(0, self.n, self.batch_size)]

    def next_indices(self) -> np.ndarray:
        if not self._pending:
            self._refill()
        self.consumed += 1
        return self._pending.pop(0)

    def __iter__(self) -> Iterator[np.ndarray]:
        while True:
            yield self.next_indices()


def batch_stream(shard: Dataset, batch_size: int, rng: RngStream) -> BatchStream:
    return BatchStream(shard.n, batch_size, rng)


def epoch_batches(shard: Dataset, batch_size: int, rng: RngStream) -> list[Dataset]:
    """One epoch of batches from a fresh stream."""
    stream = BatchStream(shard.n, batch_size, rng)
    return [shard.take(stream.next_indices()) for _ in range(stream.batches_per_epoch)]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / min(batch_size, n))


# -- files ------------------------------------------------------------------


def write_csv(path: Union[str, Path], ds: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(ds.d)] + ["target"])
        for row, y in zip(ds.inputs, ds.targets):
            w.writerow([repr(float(v)) for v in row] + [repr(float(y))])


def load_csv(path: Union[str, Path], task: str = "regression") -> Dataset:
    """Load a numeric CSV with a header row; the last column is the target."""
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path}: empty file") from None
        width = len(header)
        if width < 2:
            raise InvalidInputError(f"{path}: need at least one input column and a target column")
        for record in reader:
            line = reader.line_num
            if not record:
                continue
            if len(record) != width:
                raise InvalidInputError(f"{path}:{line}: expected {width} fields, got {len(record)}")
            try:
                values = [float(cell) for cell in record]
            except ValueError as exc:
                raise InvalidInputError(f"{path}:{line}: non-numeric cell ({exc})") from None
            if not all(math.isfinite(v) for v in values):
                raise InvalidInputError(f"{path}:{line}: non-finite value")
            rows.append(values)
    if not rows:
        raise InvalidInputError(f"{path}: no data rows")
    arr = np.asarray(rows)
    return Dataset(arr[:, :-1], arr[:, -1], task)


def write_shards(directory: Union[str, Path], shards: list[Dataset], manifest: dict) -> Path:
    """Write each shard as CSV plus a ``manifest.json`` with seeds and partition metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(shards):
        name = f"shard_{i:03d}.csv"
        write_csv(directory / name, s)
        entries.append({"client": i, "file": name, "rows": s.n, "meta": s.meta})
    body = dict(manifest, shards=entries)
    out = directory / "manifest.json"
    out.write_text(json.dumps(body, indent=2, sort_keys=True, default=int))
    return out
