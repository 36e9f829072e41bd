"""Declarative experiments: config loading, the run pipeline, sweeps and plot data.

A config is a YAML mapping (schema in the README).  ``include:`` lists other
YAML files, resolved relative to the including file and deep-merged in
order before the including file's own keys.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import yaml

from . import __version__
from .async_agg import ArrivalSchedule, simulate_arrivals
from .data import Dataset, PartitionSpec, gen_synthetic, load_csv, partition
from .diagnostics import DiagnosticsReport, compose_bound, diagnose, estimate_tau
from .divergence import paired_run, verify_bound_chain
from .models import LogisticModel, LowRankAdapter, MLPModel, Model, QuadraticModel, pretrain, wrap_lowrank
from .numerics import InvalidInputError, RngStream, load_vector, save_vector
from .protocol import FLConfig, Federation, comm_cost, run_multiround, run_oneshot

log = logging.getLogger(__name__)

OUT_ENV = "ONESHOT_FL_OUT"
SCHEMA_VERSION = 1
FIGURES = ("smoothness", "bound", "standalone", "incremental", "rounds")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


class MissingArtifactError(FileNotFoundError):
    pass


# -- config -----------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config_file(path: Union[str, Path], _seen: Optional[set] = None) -> dict:
    path = Path(path).resolve()
    seen = _seen or set()
    if path in seen:
        raise ConfigError(f"include cycle at {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML parse error: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    merged: dict = {}
    for inc in raw.pop("include", []) or []:
        merged = _merge(merged, load_config_file(path.parent / inc, seen | {path}))
    return _merge(merged, raw)


DEFAULTS: dict[str, Any] = {
    "name": "experiment",
    "seed": 0,
    "data": {
        "task": "binary",
        "n": 600,
        "n_test": 1000,
        "d": 8,
        "n_groups": 1,
        "shift": 0.0,
        "noise": 0.1,
        "margin": 0.0,
        "family": 0,
    },
    "partition": {"strategy": "iid", "alpha": 1.0},
    "fl": {
        "mode": "paired",
        "m": 5,
        "T": 3,
        "k": 10,
        "p": None,
        "lr": 0.1,
        "lr_schedule": "constant",
        "lr_min": 0.0,
        "alpha": 1.0,
        "batch_size": 16,
    },
    "models": [],
    "analysis": {
        "divergence": True,
        "diagnostics": True,
        "diagnostics_batch": 64,
        "standalone": False,
        "async": False,
        "sweep": False,
        "score": "accuracy",
    },
}


@dataclass
class ExperimentConfig:
    raw: dict
    source: Optional[Path] = None

    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def fl(self) -> dict:
        return self.raw["fl"]

    @property
    def models(self) -> list[dict]:
        return self.raw["models"]

    @property
    def analysis(self) -> dict:
        return self.raw["analysis"]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return ExperimentConfig(raw, self.source)

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def fl_config(self, fl_seed: int) -> FLConfig:
        f = self.fl
        return FLConfig(
            m=f["m"], T=f["T"], k=f["k"], p=_resolve_p(f["p"], f["m"]), lr=f["lr"],
            lr_schedule=f["lr_schedule"], lr_min=f["lr_min"],
            alpha=tuple(f["alpha"]) if isinstance(f["alpha"], list) else f["alpha"],
            batch_size=f["batch_size"], seed=fl_seed,
            mode="one-shot" if f["mode"] == "one-shot" else "multi-round",
        )


def _resolve_p(p, m):
    if p is None or p == "uniform":
        return None
    return tuple(p)


def validate(raw: dict) -> ExperimentConfig:
    cfg = _merge(DEFAULTS, raw)
    f = cfg["fl"]
    for key in ("m", "T", "k", "batch_size"):
        if not isinstance(f[key], int) or isinstance(f[key], bool):
            raise ConfigError(f"fl.{key}: must be an integer, got {f[key]!r}")
    for key in ("lr", "lr_min"):
        if not isinstance(f[key], (int, float)) or isinstance(f[key], bool):
            raise ConfigError(f"fl.{key}: must be a number, got {f[key]!r} (YAML needs 1.0e+6, not 1.0e6)")
    if f["T"] < 1:
        raise ConfigError(f"fl.T: number of rounds must be >= 1, got {f['T']}")
    if f["k"] < 1:
        raise ConfigError(f"fl.k: local steps per round must be >= 1, got {f['k']}")
    if f["mode"] not in ("paired", "multi-round", "one-shot"):
        raise ConfigError(f"fl.mode: expected paired, multi-round or one-shot, got {f['mode']!r}")
    if f["mode"] == "one-shot" and f["T"] != 1:
        raise ConfigError(f"fl.T: one-shot mode runs a single round; T={f['T']} given (set T=1, k=T*k)")
    p = f["p"]
    if p not in (None, "uniform"):
        if not isinstance(p, list) or len(p) != f["m"]:
            raise ConfigError(f"fl.p: need a list of {f['m']} scaling factors")
        if abs(math.fsum(p) - 1.0) > 1e-9:
            raise ConfigError(f"fl.p: scaling factors must sum to 1, got {math.fsum(p)!r}")
    if not cfg["models"]:
        raise ConfigError("models: at least one model variant is required")
    labels = [mdl.get("label") for mdl in cfg["models"]]
    if any(not lbl for lbl in labels) or len(set(labels)) != len(labels):
        raise ConfigError("models: every variant needs a unique label")
    for n, mdl in enumerate(cfg["models"]):
        if mdl.get("kind") not in ("quadratic", "logistic", "mlp"):
            raise ConfigError(f"models[{n}].kind: expected quadratic, logistic or mlp, got {mdl.get('kind')!r}")
    d = cfg["data"]
    if "csv" not in d and d["task"] not in ("regression", "binary", "quadratic"):
        raise ConfigError(f"data.task: unknown task {d['task']!r}")
    try:
        FLConfig(m=f["m"], T=f["T"], k=f["k"], p=_resolve_p(p, f["m"]), lr=f["lr"],
                 lr_schedule=f["lr_schedule"], batch_size=f["batch_size"],
                 alpha=tuple(f["alpha"]) if isinstance(f["alpha"], list) else f["alpha"])
        PartitionSpec(cfg["partition"]["strategy"], f["m"], 0, cfg["partition"].get("alpha", 1.0))
    except InvalidInputError as exc:
        raise ConfigError(f"fl: {exc}") from None
    return ExperimentConfig(cfg)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    cfg = validate(load_config_file(path))
    cfg.source = Path(path)
    return cfg


# -- building blocks --------------------------------------------------------


def derive_seed(master: int, *tags) -> int:
    return int(RngStream(master, ("derive",) + tags).generator().integers(0, 2**62))


@dataclass
class Setup:
    label: str
    model: Model
    eval_model: Model
    fed: Federation
    test: Dataset
    train: Dataset
    fl: FLConfig
    spec: dict
    seeds: dict = field(default_factory=dict)


def build_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, int]:
    d = cfg.data
    seed = derive_seed(cfg.seed, "data")
    if "csv" in d:
        base = Path(cfg.source).parent if cfg.source else Path.cwd()
        ds = load_csv(base / d["csv"], task=d.get("task", "regression"))
    else:
        ds = gen_synthetic(
            d["task"], d["n"] + d["n_test"], d["d"], seed=seed, n_groups=d["n_groups"],
            shift=d["shift"], noise=d["noise"], margin=d["margin"], family=d["family"],
        )
    n_test = min(d.get("n_test", 0), ds.n - cfg.fl["m"])
    perm = RngStream(seed, ("test-split",)).generator().permutation(ds.n)
    test = ds.take(np.sort(perm[:n_test])) if n_test > 0 else ds
    train = ds.take(np.sort(perm[n_test:]))
    return train, test, seed


def _quadratic_models(spec: dict, m: int, dim: int, seed: int) -> list[QuadraticModel]:
    g = RngStream(seed, ("quadratic",)).generator()
    centers = spec.get("centers")
    if centers is None:
        centers = spec.get("center_spread", 1.0) * g.standard_normal((m, dim))
    centers = np.asarray(centers, dtype=np.float64)
    curv = spec.get("curvatures")
    if curv is None:
        h = float(spec.get("curvature_spread", 0.0))
        if not 0 <= h < 1:
            raise ConfigError("models.curvature_spread must lie in [0, 1)")
        curv = spec.get("curvature", 1.0) * (1.0 + h * g.uniform(-1.0, 1.0, size=(m, dim)))
    curv = np.asarray(curv, dtype=np.float64)
    return [QuadraticModel(centers[i], curv[i]) for i in range(m)]


def build_variant(cfg: ExperimentConfig, spec: dict, train: Dataset, test: Dataset) -> Setup:
    label = spec["label"]
    m = cfg.fl["m"]
    part_seed = derive_seed(cfg.seed, "partition")
    shards = partition(train, PartitionSpec(cfg.raw["partition"]["strategy"], m, part_seed,
                                            cfg.raw["partition"].get("alpha", 1.0)))
    model_seed = derive_seed(cfg.seed, "model", label)
    fl_seed = derive_seed(cfg.seed, "fl")
    init_rng = RngStream(model_seed, ("init",))
    kind = spec["kind"]
    if kind == "quadratic":
        models = _quadratic_models(spec, m, train.d, model_seed)
        w0 = float(spec.get("init_scale", 1.0)) * init_rng.generator().standard_normal(train.d)
        fed = Federation(models, shards, w0)
        return Setup(label, models[0], models[0], fed, test, train, cfg.fl_config(fl_seed), spec,
                     {"model": model_seed, "fl": fl_seed, "partition": part_seed})
    if kind == "logistic":
        model: Model = LogisticModel(train.d)
    else:
        model = MLPModel(train.d, spec.get("hidden", [16]), loss=spec.get("loss", "logistic"),
                         parametrization=spec.get("parametrization", "standard"))
    w0 = model.init_params(init_rng, float(spec.get("init_scale", 1.0)))
    pre = spec.get("pretrain")
    seeds = {"model": model_seed, "fl": fl_seed, "partition": part_seed}
    if pre and pre.get("steps", 0) > 0:
        d = cfg.data
        pre_seed = derive_seed(cfg.seed, "pretrain", label)
        seeds["pretrain"] = pre_seed
        pool = gen_synthetic(
            d["task"], pre.get("n", 4000), train.d, seed=pre_seed,
            n_groups=pre.get("n_groups", 8), shift=pre.get("shift", d["shift"]),
            noise=d["noise"], margin=d["margin"], family=pre.get("family", d["family"]),
        )
        w0 = pretrain(model, pool, pre["steps"], pre.get("lr", 0.1), RngStream(pre_seed, ("sgd",)),
                      init=w0, batch_size=pre.get("batch_size", 32))
    eval_model = model
    lr_spec = spec.get("lowrank")
    if lr_spec:
        wrapped = wrap_lowrank(model, lr_spec["rank"], w0, lr_spec.get("layers"))
        w0 = wrapped.init_params(RngStream(model_seed, ("lowrank",)), lr_spec.get("init_scale", 1.0))
        model = wrapped
    fed = Federation([model] * m, shards, w0)
    return Setup(label, model, eval_model, fed, test, train, cfg.fl_config(fl_seed), spec, seeds)


def effective(setup: Setup, w) -> np.ndarray:
    """Parameters of the full model (adapters folded in)."""
    return setup.model.effective(w) if isinstance(setup.model, LowRankAdapter) else np.asarray(w)


def evaluate(setup: Setup, w) -> dict:
    if isinstance(setup.model, QuadraticModel):
        m = setup.fed.m
        loss = math.fsum(mdl.objective(w, None) for mdl in setup.fed.models) / m
        return {"loss": loss, "neg_loss": -loss}
    res = setup.model.evaluate(w, setup.test)
    res["neg_loss"] = -res["loss"]
    return res


def score(setup: Setup, w, key: str) -> float:
    res = evaluate(setup, w)
    if key not in res:
        raise ConfigError(f"analysis.score: metric {key!r} is not available for {setup.spec['kind']} models")
    return res[key]


def diagnostics_batch(setup: Setup, size: int) -> Optional[Dataset]:
    if isinstance(setup.model, QuadraticModel):
        return None
    pooled = setup.train
    rows = RngStream(setup.fl.seed, ("diagnostics-batch",)).generator().choice(
        pooled.n, size=min(size, pooled.n), replace=False)
    return pooled.take(np.sort(rows))


# -- pipeline ---------------------------------------------------------------


def run_variant(cfg: ExperimentConfig, setup: Setup, out: Optional[Path]) -> dict:
    a = cfg.analysis
    fl = setup.fl
    res: dict = {"label": setup.label, "model": setup.model.describe(), "dim": setup.model.dim, "seeds": setup.seeds}
    mode = cfg.fl["mode"]
    score_key = a["score"] if not isinstance(setup.model, QuadraticModel) else "neg_loss"
    init_metrics = evaluate(setup, setup.fed.w0)
    res["init"] = init_metrics

    pair = None
    if mode == "paired":
        pair = paired_run(fl, setup.fed)
        w_multi, multi, w_one, one = pair.w_multi, pair.multi, pair.w_oneshot, pair.oneshot
    elif mode == "multi-round":
        w_multi, multi = run_multiround(fl, setup.fed)
        w_one = one = None
    else:
        w_one, one = run_oneshot(fl, setup.fed)
        w_multi = multi = None

    final = {}
    if multi is not None:
        final["multi-round"] = evaluate(setup, w_multi)
        res["curve"] = [dict(round=t, **evaluate(setup, w)) for t, w in enumerate(multi.global_params)]
        res["grad_evals_multi"] = multi.grad_evals
    if one is not None:
        final["one-shot"] = evaluate(setup, w_one)
        res["grad_evals_oneshot"] = one.grad_evals
    res["final"] = final
    if multi is not None and one is not None:
        res["final_loss_gap"] = abs(final["one-shot"]["loss"] - final["multi-round"]["loss"])

    S = setup.model.dim * 8
    T_multi = fl.T
    res["comm_cost"] = {
        "payload_bytes": S,
        "multi-round": comm_cost(fl.m, T_multi, S, "multi-round"),
        "one-shot": comm_cost(fl.m, T_multi, S, "one-shot"),
    }

    diag = None
    if a["diagnostics"]:
        w_end = w_multi if w_multi is not None else w_one
        batch = diagnostics_batch(setup, a["diagnostics_batch"])
        diag = diagnose(setup.model, setup.fed.w0, w_end, batch, T=fl.T, k=fl.k, m=fl.m,
                        include_m=False, label=setup.label)
        res["diagnostics"] = diag.to_json()
        res["gamma_w0_with_m"] = compose_bound(diag.L_hat, diag.tau_hat, fl.T, fl.k, fl.m, diag.w0_norm, True)[0]
        res["tau_effective"] = estimate_tau(effective(setup, setup.fed.w0), effective(setup, w_end))

    if a["divergence"]:
        if pair is None:
            raise ConfigError("analysis.divergence: needs fl.mode = paired")
        report = verify_bound_chain(pair, diag)
        res["divergence"] = report.to_json()

    if a["standalone"]:
        if one is None:
            raise ConfigError("analysis.standalone: needs a one-shot run (fl.mode paired or one-shot)")
        res["standalone"] = standalone_rows(setup, one.local_finals[0], w_one, score_key)

    if a["async"]:
        if one is None:
            raise ConfigError("analysis.async: needs a one-shot run (fl.mode paired or one-shot)")
        spec = a["async"] if isinstance(a["async"], dict) else {}
        deltas = [w - setup.fed.w0 for w in one.local_finals[0]]
        if spec.get("schedule", "in-order") == "random":
            sched = ArrivalSchedule.random(fl.m, derive_seed(cfg.seed, "arrivals"), spec.get("drop_prob", 0.0))
        else:
            sched = ArrivalSchedule.in_order(fl.m, spec.get("dropped", []))
        snaps, agg = simulate_arrivals(sched, deltas, setup.fed.w0, fl.p, alpha=fl.alpha_at(0),
                                       policy=spec.get("policy", "renormalize"),
                                       metric=lambda w: score(setup, w, score_key))
        w_async, part = agg.finalize()
        res["async"] = {
            "score": score_key,
            "base_metric": score(setup, setup.fed.w0, score_key),
            "sync_metric": score(setup, w_one, score_key),
            "snapshots": [{"arrival_index": s.arrival_index, "client_id": s.client_id,
                           "time": s.time, "metric": s.metric} for s in snaps],
            "missing": part.missing,
            "final_vs_sync_rel_diff": float(np.linalg.norm(w_async - w_one) / max(np.linalg.norm(w_one), 1e-300)),
        }

    if out is not None:
        ck = out / "checkpoints"
        ck.mkdir(parents=True, exist_ok=True)
        tr = out / "trajectories"
        tr.mkdir(parents=True, exist_ok=True)
        files = {}
        save_vector(ck / f"{setup.label}_w0.vec", setup.fed.w0)
        files["w0"] = f"checkpoints/{setup.label}_w0.vec"
        if multi is not None:
            names = multi.save_checkpoints(ck, f"{setup.label}_multi")
            files["multi_rounds"] = [f"checkpoints/{n}" for n in names]
            multi.to_jsonl(tr / f"{setup.label}_multi.jsonl")
        if one is not None:
            names = one.save_checkpoints(ck, f"{setup.label}_oneshot")
            files["oneshot_rounds"] = [f"checkpoints/{n}" for n in names]
            one.to_jsonl(tr / f"{setup.label}_oneshot.jsonl")
            locs = []
            for i, w in enumerate(one.local_finals[0]):
                name = f"{setup.label}_oneshot_local{i:03d}.vec"
                save_vector(ck / name, w)
                locs.append(f"checkpoints/{name}")
            files["oneshot_locals"] = locs
        res["files"] = files
        if "divergence" in res:
            res["divergence"]["checkpoints"] = {k: v for k, v in files.items() if k != "oneshot_locals"}
            _write_json(out / f"divergence_{setup.label}.json", res["divergence"])
        if diag is not None:
            _write_json(out / f"diagnostics_{setup.label}.json", res["diagnostics"])

    if a["sweep"]:
        sw = a["sweep"] if isinstance(a["sweep"], dict) else {}
        res["sweep"] = sweep_rounds(setup, sw.get("T_values", [1, 2, 3, 4, 5]),
                                    sw.get("total_steps", fl.total_steps), score_key)
    return res


def standalone_rows(setup: Setup, locals_, w_global, score_key: str) -> list[dict]:
    """One row per client's pre-aggregation model plus one for the aggregated model."""
    rows = [{"client": str(i), "metric": score(setup, w, score_key)} for i, w in enumerate(locals_)]
    rows.append({"client": "global", "metric": score(setup, w_global, score_key)})
    return rows


def sweep_rounds(setup: Setup, T_values, total_steps: int, score_key: str) -> list[dict]:
    """Multi-round runs at a fixed per-client step budget, one per ``T``."""
    for T in T_values:
        if T < 1 or total_steps % T:
            raise InvalidInputError(f"total steps {total_steps} not divisible by T={T}")
    rows = []
    for T in T_values:
        cfg = setup.fl.with_rounds(T, total_steps // T)
        w, trace = run_multiround(cfg, setup.fed)
        rows.append({"T": T, "k": total_steps // T, "metric": score(setup, w, score_key),
                     "grad_evals": trace.grad_evals})
    return rows


def unimodal_within(values, rel_tol: float = 0.05) -> bool:
    """True if the curve rises then falls, ignoring wiggles up to ``rel_tol * max|v|``."""
    v = [float(x) for x in values]
    if len(v) < 3:
        return True
    tol = rel_tol * max(abs(x) for x in v)
    for peak in range(len(v)):
        up = all(v[i + 1] >= v[i] - tol for i in range(peak))
        down = all(v[i + 1] <= v[i] + tol for i in range(peak, len(v) - 1))
        if up and down:
            return True
    return False


def _jsonable(x):
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, float) and math.isinf(x):
        return "-inf" if x < 0 else "inf"
    raise TypeError(f"not JSON serializable: {type(x)}")


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    tmp.replace(path)


def manifest(cfg: ExperimentConfig) -> dict:
    return {
        "config": cfg.raw,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": {
            "oneshot_fl": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }


def run_experiment(cfg: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> dict:
    """Run every model variant of ``cfg``; write the bundle to ``out`` when given."""
    out_dir = Path(out) if out is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    train, test, _ = build_data(cfg)
    variants = {}
    for spec in cfg.models:
        setup = build_variant(cfg, spec, train, test)
        variants[setup.label] = run_variant(cfg, setup, out_dir)
    bundle = {"schema_version": SCHEMA_VERSION, "name": cfg.name, "manifest": manifest(cfg), "variants": variants}
    if out_dir is not None:
        _write_json(out_dir / "metrics.json", bundle)
        _write_json(out_dir / "manifest.json", bundle["manifest"])
    return bundle


def resolve_out(cfg: ExperimentConfig, cli_out: Optional[str]) -> Optional[Path]:
    if cli_out:
        return Path(cli_out)
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env) / cfg.name
    if cfg.raw.get("output_dir"):
        return Path(cfg.raw["output_dir"])
    return None


def load_bundle(run_dir: Union[str, Path]) -> dict:
    path = Path(run_dir) / "metrics.json"
    if not path.exists():
        raise MissingArtifactError(f"no metrics.json in {run_dir}; run the experiment first")
    return json.loads(path.read_text())


def rerun_from_manifest(run_dir: Union[str, Path], out: Optional[Union[str, Path]] = None) -> dict:
    man = json.loads((Path(run_dir) / "manifest.json").read_text())
    return run_experiment(validate(man["config"]), out)


# -- sweeps over seeds and T -------------------------------------------------


def _sweep_point(args) -> dict:
    raw, seed, T_values, total = args
    cfg = validate(raw).with_seed(seed)
    train, test, _ = build_data(cfg)
    out = {}
    for spec in cfg.models:
        setup = build_variant(cfg, spec, train, test)
        key = cfg.analysis["score"] if not isinstance(setup.model, QuadraticModel) else "neg_loss"
        tot = total or setup.fl.total_steps
        out[setup.label] = sweep_rounds(setup, T_values, tot, key)
    return {"seed": seed, "variants": out}


def sweep_experiment(cfg: ExperimentConfig, T_values, total_steps: Optional[int], seeds, jobs: int = 1) -> list[dict]:
    tasks = [(cfg.raw, s, list(T_values), total_steps) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_point, tasks))
    return [_sweep_point(t) for t in tasks]


# -- standalone from a finished run ------------------------------------------


def standalone_eval(run_dir: Union[str, Path]) -> dict:
    """Score each saved one-shot local model and the global model of a finished run."""
    run_dir = Path(run_dir)
    bundle = load_bundle(run_dir)
    cfg = validate(bundle["manifest"]["config"])
    train, test, _ = build_data(cfg)
    result = {}
    for spec in cfg.models:
        setup = build_variant(cfg, spec, train, test)
        files = bundle["variants"][setup.label].get("files", {})
        if "oneshot_locals" not in files or "oneshot_rounds" not in files:
            raise MissingArtifactError(f"{setup.label}: run has no one-shot checkpoints")
        paths = [run_dir / f for f in files["oneshot_locals"]] + [run_dir / files["oneshot_rounds"][-1]]
        for p in paths:
            if not p.exists():
                raise MissingArtifactError(f"missing checkpoint {p}")
        locals_ = [load_vector(p) for p in paths[:-1]]
        key = cfg.analysis["score"] if not isinstance(setup.model, QuadraticModel) else "neg_loss"
        result[setup.label] = standalone_rows(setup, locals_, load_vector(paths[-1]), key)
    return result


# -- plot data --------------------------------------------------------------


def emit_plotdata(bundle: dict, which: str, out_dir: Union[str, Path]) -> list[Path]:
    """Write the CSV behind one figure analog; returns the files written."""
    if which not in FIGURES:
        raise InvalidInputError(f"unknown figure tag {which!r}; expected one of {FIGURES}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = bundle["variants"]
    need = {"smoothness": "diagnostics", "bound": "diagnostics", "standalone": "standalone", "incremental": "async", "rounds": "sweep"}[which]
    have = [lbl for lbl, v in variants.items() if need in v]
    if not have:
        raise MissingArtifactError(f"{which} needs analysis.{need} enabled in the config")
    written = []

    def _write(name, header, rows):
        path = out_dir / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        written.append(path)

    if which == "smoothness":
        rows = [[lbl, repr(v["diagnostics"]["L_hat"]), repr(v["diagnostics"]["tau_hat"]),
                 repr(v["diagnostics"]["w0_norm"])] for lbl, v in variants.items() if lbl in have]
        _write("smoothness.csv", ["model_label", "L_hat", "tau_hat", "w0_norm"], rows)
    elif which == "bound":
        rows = []
        for lbl in have:
            dg = variants[lbl]["diagnostics"]
            rows.append([lbl, repr(dg["L_hat"]), repr(dg["tau_hat"]), dg["Tk"], repr(dg["w0_norm"]),
                         repr(dg["gamma_w0"]), str(dg["log_gamma_w0"]),
                         repr(variants[lbl].get("divergence", {}).get("eps_norm", float("nan")))])
        _write("bound.csv", ["model_label", "L_hat", "tau_hat", "Tk", "w0_norm", "gamma_w0",
                            "log_gamma_w0", "measured_eps_norm"], rows)
    elif which == "standalone":
        for lbl in have:
            _write(f"standalone_{lbl}.csv", ["client", "metric"],
                   [[r["client"], repr(r["metric"])] for r in variants[lbl]["standalone"]])
    elif which == "incremental":
        for lbl in have:
            _write(f"incremental_{lbl}.csv", ["arrival_index", "client_id", "metric"],
                   [[s["arrival_index"], s["client_id"], repr(s["metric"])] for s in variants[lbl]["async"]["snapshots"]])
    else:
        for lbl in have:
            _write(f"rounds_{lbl}.csv", ["T", "k", "metric", "grad_evals"],
                   [[r["T"], r["k"], repr(r["metric"]), r["grad_evals"]] for r in variants[lbl]["sweep"]])
    return written
