"""Smoothness, relative-update and bound estimators for trained models."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import Dataset
from .models import Model
from .numerics import InvalidInputError, ParamVector
from .protocol import Federation, TrajectoryLog, client_step_weights


class DegeneratePairError(InvalidInputError):
    pass


class UndefinedTauError(InvalidInputError):
    pass


def estimate_L(model: Model, w_a: ParamVector, w_b: ParamVector, batch: Optional[Dataset]) -> float:
    """``|grad F(w_a) - grad F(w_b)| / |w_a - w_b|`` on one fixed batch."""
    w_a = np.asarray(w_a, dtype=np.float64)
    w_b = np.asarray(w_b, dtype=np.float64)
    dw = float(np.linalg.norm(w_a - w_b))
    if dw < 1e-14:
        raise DegeneratePairError(f"parameter pair too close for a ratio (|w_a - w_b| = {dw:g})")
    dg = float(np.linalg.norm(model.gradient(w_a, batch) - model.gradient(w_b, batch)))
    return dg / dw


def estimate_L_max(model: Model, pairs: Sequence[tuple[ParamVector, ParamVector]], batch) -> float:
    """Largest :func:`estimate_L` over several pairs; degenerate pairs are skipped."""
    best = 0.0
    for a, b in pairs:
        try:
            best = max(best, estimate_L(model, a, b, batch))
        except DegeneratePairError:
            continue
    return best


def estimate_tau(w0: ParamVector, w_final: ParamVector) -> float:
    """``|w_final - w0| / |w0|``."""
    w0 = np.asarray(w0, dtype=np.float64)
    n0 = float(np.linalg.norm(w0))
    if n0 == 0.0:
        raise UndefinedTauError("|w0| = 0: relative update size is undefined")
    return float(np.linalg.norm(np.asarray(w_final) - w0)) / n0


@dataclass
class AssumptionCheck:
    tau_cap: float
    passed: list[bool]
    steps: list[tuple[int, int, int]]  # (round, local step, client)

    @property
    def violations(self) -> list[tuple[int, int, int]]:
        return [s for s, ok in zip(self.steps, self.passed) if not ok]

    @property
    def all_pass(self) -> bool:
        return all(self.passed)


def assumption_check(
    trajectory: TrajectoryLog,
    tau_cap: float,
    fed: Optional[Federation] = None,
    w0: Optional[ParamVector] = None,
) -> AssumptionCheck:
    """Flag every step whose weights sit further than ``tau_cap * |w0|`` from ``w0``.

    Each step is judged on the weights it produced.  ``fed`` is only needed
    when the trajectory did not retain its per-step weights.
    """
    if w0 is None:
        w0 = trajectory.global_params[0]
    w0 = np.asarray(w0)
    n0 = float(np.linalg.norm(w0))
    if n0 == 0.0:
        raise UndefinedTauError("|w0| = 0: relative update size is undefined")
    cfg = trajectory.config
    limit = tau_cap * n0
    passed, steps = [], []
    for i in range(cfg.m):
        if trajectory.step_weights is None and fed is None:
            raise InvalidInputError("trajectory has no retained weights; pass the federation to replay")
        ws = client_step_weights(trajectory, fed, i) if fed is not None else trajectory.step_weights[i]
        rounds = [t for t in range(len(trajectory.participants)) if i in trajectory.participants[t]]
        for n, t in enumerate(rounds):
            finals = trajectory.local_finals[t][trajectory.participants[t].index(i)]
            for j in range(cfg.k):
                nxt = ws[n * cfg.k + j + 1] if j + 1 < cfg.k else finals
                steps.append((t, j, i))
                passed.append(bool(np.linalg.norm(nxt - w0) <= limit))
    return AssumptionCheck(tau_cap, passed, steps)


def compose_bound(
    L_hat: float,
    tau_hat: float,
    T: int,
    k: int,
    m: int,
    w0_norm: float,
    include_m: bool = True,
) -> tuple[float, float]:
    """``L tau T k m |w0|`` (``m`` omitted when ``include_m`` is false) and its natural log.

    A zero product has log ``-inf``.
    """
    factors = (L_hat, tau_hat, T, k, m, w0_norm)
    if any(f < 0 for f in factors):
        raise InvalidInputError("bound factors must be >= 0")
    gamma = L_hat * tau_hat * T * k * w0_norm
    if include_m:
        gamma *= m
    return gamma, (math.log(gamma) if gamma > 0 else -math.inf)


@dataclass
class DiagnosticsReport:
    L_hat: float
    tau_hat: float
    w0_norm: float
    T: int
    k: int
    m: int
    include_m: bool
    gamma_w0: float
    log_gamma_w0: float
    label: str = ""

    @property
    def Tk(self) -> int:
        return self.T * self.k

    def recompute(self) -> tuple[float, float]:
        return compose_bound(self.L_hat, self.tau_hat, self.T, self.k, self.m, self.w0_norm, self.include_m)

    def to_json(self) -> dict:
        d = asdict(self)
        d["Tk"] = self.Tk
        if math.isinf(self.log_gamma_w0):
            d["log_gamma_w0"] = "-inf"
        return d

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def diagnose(
    model: Model,
    w0: ParamVector,
    w_final: ParamVector,
    batch: Optional[Dataset],
    *,
    T: int,
    k: int,
    m: int,
    include_m: bool = False,
    label: str = "",
) -> DiagnosticsReport:
    """Estimate ``L`` on the pair ``(w0, w_final)``, ``tau`` and the composed bound."""
    L = estimate_L(model, w0, w_final, batch)
    tau = estimate_tau(w0, w_final)
    n0 = float(np.linalg.norm(w0))
    gamma, lg = compose_bound(L, tau, T, k, m, n0, include_m)
    return DiagnosticsReport(L, tau, n0, T, k, m, include_m, gamma, lg, label)
