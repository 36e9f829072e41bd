"""Exact one-shot vs multi-round divergence from paired runs.

Both protocols start from the same ``w0`` and, under the ``matched`` stream
policy, client i's cumulative local step ``s`` uses the same batch in either
run.  The first ``k`` steps are therefore identical and the per-client error

    eps_i = sum_{s=k}^{Tk-1} beta_s * [g_i(a_s) - g_i(b_s)]

compares the one-shot weight ``a_s`` with the multi-round weight ``b_s`` at
round ``t = s // k``, local step ``s - t*k``.  With a constant global rate
``alpha`` the aggregated error ``eps = sum_i p_i eps_i`` equals
``(w_multi - w_oneshot) / alpha``.

The bound chain is reported in a rate-aware, weighted form that holds by
construction of the estimators::

    |eps| <= grad_gap = sum_i p_i sum_s beta_s |g_i(a_s) - g_i(b_s)|
          <= smooth = sum_i p_i sum_s beta_s * L * |a_s - b_s|
          <= drift = sum_i p_i sum_s beta_s * L * 2 tau |w0|
          <= uniform = m * max(beta) * L * 2 tau * Tk * |w0|

``L`` is the largest gradient-difference ratio over the pairs above and
``tau`` the largest ``|w - w0| / |w0|`` over every logged weight.  The factor
2 comes from ``|a - b| <= |a - w0| + |b - w0|``.  The unit-rate form
``L * tau * T * k * m * |w0|`` is reported as ``bound_value``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .diagnostics import UndefinedTauError
from .numerics import InvalidInputError, ParamVector, weighted_sum
from .protocol import (
    FLConfig,
    Federation,
    TrajectoryLog,
    client_step_weights,
    run_multiround,
    run_oneshot,
)

CHAIN_RTOL = 1e-12


@dataclass
class PairedRun:
    config: FLConfig
    fed: Federation
    policy: str
    w_oneshot: ParamVector
    w_multi: ParamVector
    oneshot: TrajectoryLog
    multi: TrajectoryLog

    @property
    def w0(self) -> ParamVector:
        return self.fed.w0


def paired_run(
    config: FLConfig,
    fed: Federation,
    *,
    policy: str = "matched",
    retain_weights: Optional[bool] = None,
    max_retained_floats: int = 20_000_000,
) -> PairedRun:
    """Run the multi-round protocol and its step-matched one-shot counterpart.

    Per-step weights are kept in memory unless ``2 m T k d`` exceeds
    ``max_retained_floats``; above that they are replayed on demand.
    """
    if config.mode != "multi-round":
        raise InvalidInputError("paired_run takes the multi-round configuration")
    if config.participation < 1.0:
        raise InvalidInputError("paired runs need full participation")
    if retain_weights is None:
        retain_weights = 2 * config.m * config.total_steps * fed.w0.shape[0] <= max_retained_floats
    w_multi, multi = run_multiround(config, fed, stream_policy=policy, retain_weights=retain_weights)
    w_one, one = run_oneshot(config.as_oneshot(), fed, retain_weights=retain_weights)
    return PairedRun(config, fed, policy, w_one, w_multi, one, multi)


def _require_matched(pair: PairedRun) -> None:
    if pair.policy != "matched":
        raise InvalidInputError(
            "epsilon is only defined for matched streams; independent streams mix in batch noise"
        )


def _pairs(pair: PairedRun, i: int):
    """Yield ``(s, beta, a_s, b_s, batch)`` for the steps where the runs can differ."""
    cfg = pair.config
    a = client_step_weights(pair.oneshot, pair.fed, i)
    b = client_step_weights(pair.multi, pair.fed, i)
    ba = pair.oneshot.step_batches[i]
    bb = pair.multi.step_batches[i]
    shard = pair.fed.shards[i]
    for s in range(cfg.k, cfg.total_steps):
        if not np.array_equal(ba[s], bb[s]):
            raise InvalidInputError(f"client {i} step {s}: runs used different batches")
        yield s, cfg.beta_at(s), a[s], b[s], shard.take(ba[s])


def epsilon_local(pair: PairedRun, i: int) -> ParamVector:
    """Accumulated gradient difference between client i's one-shot and multi-round steps."""
    _require_matched(pair)
    model = pair.fed.models[i]
    eps = np.zeros_like(pair.w0)
    for _, beta, a, b, batch in _pairs(pair, i):
        eps = eps + beta * (model.gradient(a, batch) - model.gradient(b, batch))
    return eps


@dataclass
class GlobalEpsilon:
    eps: ParamVector
    eps_i: list[ParamVector]
    eps_norm: float
    eps_i_norms: list[float]
    triangle_slack: float


def epsilon_global(pair: PairedRun) -> GlobalEpsilon:
    """``eps = sum_i p_i eps_i`` and its triangle-inequality slack."""
    _require_matched(pair)
    eps_i = [epsilon_local(pair, i) for i in range(pair.config.m)]
    eps = weighted_sum(eps_i, pair.config.p)
    norms = [float(np.linalg.norm(e)) for e in eps_i]
    eps_norm = float(np.linalg.norm(eps))
    total = math.fsum(norms)
    if eps_norm > total * (1 + 1e-9) + 1e-300:
        raise AssertionError(f"triangle inequality violated: {eps_norm} > {total}")
    return GlobalEpsilon(eps, eps_i, eps_norm, norms, total - eps_norm)


@dataclass
class DivergenceReport:
    eps_norm: float
    eps_i_norms: list[float]
    triangle_slack: float
    L_hat: float
    tau_hat: float
    w0_norm: float
    T: int
    k: int
    m: int
    bound_value: float
    chain: dict
    unit_rate_chain: dict
    verdicts: dict
    trajectory_gap: float
    diagnostics: Optional[dict] = None
    checkpoints: dict = field(default_factory=dict)

    @property
    def all_hold(self) -> bool:
        return all(self.verdicts.values())

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def _leq(a: float, b: float) -> bool:
    return a <= b * (1 + CHAIN_RTOL) + 1e-300


def trajectory_tau(pair: PairedRun) -> float:
    """Largest ``|w - w0| / |w0|`` over every weight either run logged."""
    w0 = pair.w0
    w0_norm = float(np.linalg.norm(w0))
    if w0_norm == 0.0:
        raise UndefinedTauError("|w0| = 0: relative update size is undefined")
    worst = 0.0
    for trace in (pair.oneshot, pair.multi):
        candidates = list(trace.global_params)
        for finals in trace.local_finals:
            candidates.extend(finals)
        for i in range(pair.config.m):
            candidates.extend(client_step_weights(trace, pair.fed, i))
        for w in candidates:
            worst = max(worst, float(np.linalg.norm(w - w0)))
    return worst / w0_norm


def verify_bound_chain(pair: PairedRun, diagnostics=None) -> DivergenceReport:
    """Measure ``eps`` and evaluate every link of the bound chain on a paired run."""
    _require_matched(pair)
    cfg = pair.config
    w0_norm = float(np.linalg.norm(pair.w0))
    if w0_norm == 0.0:
        raise UndefinedTauError("|w0| = 0: relative update size is undefined")
    ge = epsilon_global(pair)
    tau = trajectory_tau(pair)

    # per-pair terms; L is the max ratio over exactly these pairs
    terms = []
    L = 0.0
    for i in range(cfg.m):
        model = pair.fed.models[i]
        for s, beta, a, b, batch in _pairs(pair, i):
            gd = float(np.linalg.norm(model.gradient(a, batch) - model.gradient(b, batch)))
            wd = float(np.linalg.norm(a - b))
            if wd > 0.0:
                L = max(L, gd / wd)
            terms.append((i, beta, gd, wd))

    p = cfg.p
    c10 = math.fsum(p[i] * beta * gd for i, beta, gd, _ in terms)
    c11 = math.fsum(p[i] * beta * L * wd for i, beta, _, wd in terms)
    c12 = math.fsum(p[i] * beta * L * 2 * tau * w0_norm for i, beta, _, _ in terms)
    beta_max = max(cfg.beta_at(s) for s in range(cfg.total_steps))
    Tk = cfg.total_steps
    c13 = cfg.m * beta_max * L * 2 * tau * Tk * w0_norm
    chain = {"eps_norm": ge.eps_norm, "grad_gap": c10, "smooth": c11, "drift": c12, "uniform": c13}
    verdicts = {
        "triangle": _leq(ge.eps_norm, math.fsum(ge.eps_i_norms)),
        "eps_le_grad_gap": _leq(ge.eps_norm, c10),
        "grad_gap_le_smooth": _leq(c10, c11),
        "smooth_le_drift": _leq(c11, c12),
        "drift_le_uniform": _leq(c12, c13),
    }

    bound_value = L * tau * Tk * cfg.m * w0_norm
    unit_eps = np.zeros_like(pair.w0)
    for i in range(cfg.m):
        model = pair.fed.models[i]
        for _, _, a, b, batch in _pairs(pair, i):
            unit_eps = unit_eps + (model.gradient(a, batch) - model.gradient(b, batch))
    unit_rate_chain = {
        "eps_unit_rate_norm": float(np.linalg.norm(unit_eps)),
        "grad_gap": math.fsum(gd for _, _, gd, _ in terms),
        "smooth": math.fsum(L * wd for _, _, _, wd in terms),
        "drift": L * tau * cfg.m * w0_norm * (Tk - cfg.k),
        "uniform": bound_value,
        "bound_holds": bool(float(np.linalg.norm(unit_eps)) <= bound_value * (1 + CHAIN_RTOL)),
    }

    alpha = cfg.alpha_at(0)
    gap = float(np.linalg.norm(pair.w_multi - pair.w_oneshot))
    return DivergenceReport(
        eps_norm=ge.eps_norm,
        eps_i_norms=ge.eps_i_norms,
        triangle_slack=ge.triangle_slack,
        L_hat=L,
        tau_hat=tau,
        w0_norm=w0_norm,
        T=cfg.T,
        k=cfg.k,
        m=cfg.m,
        bound_value=bound_value,
        chain=chain,
        unit_rate_chain=unit_rate_chain,
        verdicts=verdicts,
        trajectory_gap=gap / abs(alpha) if alpha != 0 else gap,
        diagnostics=diagnostics.to_json() if diagnostics is not None else None,
    )
