"""FedAvg engine: local SGD, weighted aggregation, multi-round and one-shot runners.

Sign convention: a client's update is ``delta = w_local_final - w_start``,
i.e. the descent step is already folded in, and the server applies
``w_next = w_global + alpha * sum_i p_i * delta_i``.  With ``alpha = 1`` this
is plain FedAvg, and the engine then averages the local models directly
(the same quantity, computed without the subtract/add round trip so a single
client reproduces its local model bit for bit).

Learning-rate schedules are indexed by the client's cumulative local step,
so step ``s`` has the same rate in a one-shot run and in a multi-round run.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data import BatchStream, Dataset
from .models import Model
from .numerics import InvalidInputError, ParamVector, RngStream, ShapeError, save_vector, weighted_sum

log = logging.getLogger(__name__)

MODES = ("multi-round", "one-shot")
STREAM_POLICIES = ("matched", "independent")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, message: str, t: int = -1, client: int = -1, step: int = -1):
        super().__init__(message)
        self.t = t
        self.client = client
        self.step = step


@dataclass(frozen=True)
class FLConfig:
    """Protocol settings shared by both runners.

    ``lr`` is the local rate beta, ``alpha`` the global rate (a float, or one
    value per round).  In one-shot mode ``T`` must be 1 and ``k`` is the full
    per-client step budget.
    """

    m: int
    T: int = 1
    k: int = 1
    p: Optional[tuple[float, ...]] = None
    lr: float = 0.1
    lr_schedule: str = "constant"
    lr_min: float = 0.0
    alpha: Union[float, tuple[float, ...]] = 1.0
    batch_size: int = 32
    seed: int = 0
    mode: str = "multi-round"
    participation: float = 1.0

    def __post_init__(self) -> None:
        if self.m < 1:
            raise InvalidInputError(f"m must be >= 1, got {self.m}")
        if self.T < 1:
            raise InvalidInputError(f"T must be >= 1, got {self.T}")
        if self.k < 1:
            raise InvalidInputError(f"k must be >= 1, got {self.k}")
        if self.mode not in MODES:
            raise InvalidInputError(f"unknown mode {self.mode!r}")
        if self.mode == "one-shot" and self.T != 1:
            raise InvalidInputError(f"one-shot mode requires T=1, got T={self.T}")
        p = tuple(float(x) for x in self.p) if self.p is not None else tuple([1.0 / self.m] * self.m)
        if len(p) != self.m:
            raise InvalidInputError(f"p has {len(p)} entries for m={self.m} clients")
        if any(not x > 0 for x in p):
            raise InvalidInputError("every scaling factor p_i must be > 0")
        if abs(math.fsum(p) - 1.0) > 1e-9:
            raise InvalidInputError(f"scaling factors must sum to 1, got {math.fsum(p)!r}")
        object.__setattr__(self, "p", p)
        if self.lr_schedule not in ("constant", "cosine"):
            raise InvalidInputError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not self.lr > 0:
            raise InvalidInputError("lr must be > 0")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if isinstance(self.alpha, (list, tuple)):
            if len(self.alpha) != self.T:
                raise InvalidInputError(f"alpha schedule has {len(self.alpha)} entries for T={self.T}")
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if not 0 < self.participation <= 1:
            raise InvalidInputError("participation must be in (0, 1]")

    @property
    def total_steps(self) -> int:
        return self.T * self.k

    def alpha_at(self, t: int) -> float:
        return self.alpha[t] if isinstance(self.alpha, tuple) else float(self.alpha)

    def beta_at(self, s: int) -> float:
        """Local rate for cumulative local step ``s`` (0-based)."""
        if self.lr_schedule == "constant":
            return self.lr
        frac = s / self.total_steps
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))

    def as_oneshot(self) -> "FLConfig":
        """The matched one-shot configuration: one round of ``T * k`` local steps."""
        alpha = self.alpha_at(0)
        return replace(self, T=1, k=self.total_steps, alpha=alpha, mode="one-shot")

    def with_rounds(self, T: int, k: int) -> "FLConfig":
        """Multi-round configuration with a new round split (constant alpha kept)."""
        return replace(self, T=T, k=k, alpha=self.alpha_at(0), mode="multi-round")


@dataclass
class Federation:
    """Everything a run needs besides the protocol settings.

    ``models[i]`` is client i's objective; logistic/MLP federations share one
    model object across clients, quadratic federations give each client its own.
    """

    models: list[Model]
    shards: list[Dataset]
    w0: ParamVector

    def __post_init__(self) -> None:
        if len(self.models) != len(self.shards):
            raise InvalidInputError("need one model per shard")
        self.w0 = np.array(self.w0, dtype=np.float64)
        for mdl in self.models:
            if mdl.dim != self.w0.shape[0]:
                raise ShapeError(f"w0 has dim {self.w0.shape[0]}, model expects {mdl.dim}")

    @property
    def m(self) -> int:
        return len(self.shards)


@dataclass
class ClientState:
    id: int
    model: Model
    shard: Dataset
    rng: RngStream
    params: Optional[ParamVector] = None
    stream: Optional[BatchStream] = None


@dataclass
class StepRecord:
    t: int
    j: int
    client: int
    loss: float
    grad_norm: float
    lr: float

    def to_json(self) -> dict:
        return {"t": self.t, "j": self.j, "client": self.client, "loss": self.loss,
                "grad_norm": self.grad_norm, "lr": self.lr}


@dataclass
class TrajectoryLog:
    """Per-step records and round-boundary parameters for one run.

    ``step_weights[i][s]`` is client i's parameter vector *before* cumulative
    local step ``s`` and ``step_batches[i][s]`` the batch rows that step used.
    Weights are only kept when ``retain_weights`` is set; the divergence
    analysis can otherwise replay them from ``global_params`` and the batches.
    """

    mode: str
    config: FLConfig
    records: list[StepRecord] = field(default_factory=list)
    global_params: list[ParamVector] = field(default_factory=list)
    local_finals: list[list[ParamVector]] = field(default_factory=list)
    step_batches: list[list[np.ndarray]] = field(default_factory=list)
    step_weights: Optional[list[list[ParamVector]]] = None
    participants: list[list[int]] = field(default_factory=list)
    grad_evals: int = 0

    def to_jsonl(self, path: Union[str, Path]) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")

    def save_checkpoints(self, directory: Union[str, Path], prefix: str) -> list[str]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for t, w in enumerate(self.global_params):
            name = f"{prefix}_round{t:03d}.vec"
            save_vector(directory / name, w)
            names.append(name)
        return names


def make_clients(fed: Federation, config: FLConfig) -> list[ClientState]:
    if fed.m != config.m:
        raise InvalidInputError(f"federation has {fed.m} clients, config says m={config.m}")
    root = RngStream(config.seed, ("fl",))
    return [
        ClientState(i, fed.models[i], fed.shards[i], root.fork("client").fork(i))
        for i in range(fed.m)
    ]


def _stream_for(client: ClientState, config: FLConfig, policy: str, t: int) -> BatchStream:
    if policy == "matched":
        if client.stream is None:
            client.stream = BatchStream(client.shard.n, config.batch_size, client.rng.fork("batches"))
        return client.stream
    return BatchStream(client.shard.n, config.batch_size, client.rng.fork("batches").fork(f"round-{t}"))


def local_update(
    client: ClientState,
    w_start: ParamVector,
    k: int,
    beta: Callable[[int], float],
    *,
    stream: Optional[BatchStream] = None,
    step_offset: int = 0,
    t: int = 0,
    log_to: Optional[TrajectoryLog] = None,
) -> ParamVector:
    """Run ``k`` SGD steps from ``w_start``; return ``w_final - w_start``.

    ``beta(s)`` gives the rate for cumulative step ``s = step_offset + j``.
    """
    if k < 0:
        raise InvalidInputError("k must be >= 0")
    w_start = np.asarray(w_start, dtype=np.float64)
    if w_start.shape != (client.model.dim,):
        raise ShapeError(f"w_start has shape {w_start.shape}, model expects ({client.model.dim},)")
    if stream is None:
        if client.stream is None:
            client.stream = BatchStream(client.shard.n, 32, client.rng.fork("batches"))
        stream = client.stream
    w = w_start.copy()
    keep = log_to is not None and log_to.step_weights is not None
    for j in range(k):
        s = step_offset + j
        rows = stream.next_indices()
        loss, g = client.model.loss_and_grad(w, client.shard.take(rows))
        if not math.isfinite(loss) or not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"non-finite loss at round {t}, client {client.id}, step {j}", t, client.id, j
            )
        lr = beta(s)
        if log_to is not None:
            log_to.grad_evals += 1
            log_to.records.append(StepRecord(t, j, client.id, loss, float(np.linalg.norm(g)), lr))
            log_to.step_batches[client.id].append(rows)
            if keep:
                log_to.step_weights[client.id].append(w)
        w = w - lr * g
    if not np.all(np.isfinite(w)):
        raise DivergenceError(f"non-finite parameters after round {t}, client {client.id}", t, client.id, k)
    client.params = w
    return w - w_start


def aggregate(w_global: ParamVector, deltas: Sequence[ParamVector], p: Sequence[float], alpha: float) -> ParamVector:
    """``w_global + alpha * sum_i p_i delta_i``, summed in client order."""
    if abs(math.fsum(p) - 1.0) > 1e-9:
        raise InvalidInputError(f"aggregation weights must sum to 1, got {math.fsum(p)!r}")
    step = weighted_sum(deltas, p)
    w_global = np.asarray(w_global, dtype=np.float64)
    if step.shape != w_global.shape:
        raise ShapeError(f"delta dim {step.shape[0]} does not match global dim {w_global.shape[0]}")
    return w_global + alpha * step


def _aggregate_locals(w_global, locals_, p, alpha) -> ParamVector:
    if alpha == 1.0:
        return weighted_sum(locals_, p)
    return aggregate(w_global, [w - w_global for w in locals_], p, alpha)


def _run(fed: Federation, config: FLConfig, policy: str, retain_weights: bool) -> tuple[ParamVector, TrajectoryLog]:
    if policy not in STREAM_POLICIES:
        raise InvalidInputError(f"unknown stream policy {policy!r}")
    clients = make_clients(fed, config)
    trace = TrajectoryLog(config.mode, config)
    trace.step_batches = [[] for _ in range(config.m)]
    if retain_weights:
        trace.step_weights = [[] for _ in range(config.m)]
    w = np.array(fed.w0, dtype=np.float64)
    trace.global_params.append(w)
    part_rng = RngStream(config.seed, ("participation",)).generator()
    for t in range(config.T):
        if config.participation < 1.0:
            n_sel = max(1, math.ceil(config.participation * config.m))
            chosen = sorted(part_rng.choice(config.m, size=n_sel, replace=False).tolist())
        else:
            chosen = list(range(config.m))
        locals_ = []
        for i in chosen:
            c = clients[i]
            local_update(
                c, w, config.k, config.beta_at,
                stream=_stream_for(c, config, policy, t),
                step_offset=t * config.k, t=t, log_to=trace,
            )
            locals_.append(c.params)
        trace.local_finals.append(locals_)
        trace.participants.append(chosen)
        ps = [config.p[i] for i in chosen]
        if len(chosen) < config.m:
            total = math.fsum(ps)
            ps = [x / total for x in ps]
        w = _aggregate_locals(w, locals_, ps, config.alpha_at(t))
        if not np.all(np.isfinite(w)):
            raise DivergenceError(f"non-finite global parameters after round {t}", t)
        trace.global_params.append(w)
    return w, trace


def run_multiround(
    config: FLConfig, fed: Federation, *, stream_policy: str = "matched", retain_weights: bool = False
) -> tuple[ParamVector, TrajectoryLog]:
    """``T`` rounds of broadcast, ``k`` local steps per client, aggregate."""
    if config.mode != "multi-round":
        raise InvalidInputError("run_multiround needs mode='multi-round'")
    return _run(fed, config, stream_policy, retain_weights)


def run_oneshot(
    config: FLConfig, fed: Federation, *, retain_weights: bool = False
) -> tuple[ParamVector, TrajectoryLog]:
    """Every client trains ``k`` (the full budget) steps from ``w0``; aggregate once."""
    if config.mode != "one-shot":
        raise InvalidInputError("run_oneshot needs mode='one-shot'")
    return _run(fed, config, "matched", retain_weights)


def comm_cost(m: float, T: float, S: float, mode: str) -> float:
    """Bytes moved: ``2 m T S`` for multi-round, ``2 m S`` for one-shot."""
    if min(m, T, S) < 0:
        raise InvalidInputError("comm_cost arguments must be >= 0")
    if mode == "multi-round":
        return 2 * m * T * S
    if mode == "one-shot":
        return 2 * m * S
    raise InvalidInputError(f"unknown mode {mode!r}")


def client_step_weights(trace: TrajectoryLog, fed: Federation, i: int) -> list[ParamVector]:
    """Client i's pre-step weights for every cumulative step of a run.

    Uses the retained weights when present; otherwise replays each round
    from its broadcast parameters with the logged batches and rates.
    """
    if trace.step_weights is not None:
        return trace.step_weights[i]
    cfg = trace.config
    model, shard = fed.models[i], fed.shards[i]
    batches = trace.step_batches[i]
    out: list[ParamVector] = []
    pos = 0
    for t in range(cfg.T):
        if i not in trace.participants[t]:
            continue
        w = np.array(trace.global_params[t])
        for j in range(cfg.k):
            s = t * cfg.k + j
            out.append(w)
            w = w - cfg.beta_at(s) * model.gradient(w, shard.take(batches[pos]))
            pos += 1
    return out
