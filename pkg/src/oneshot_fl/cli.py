"""Command-line entry point: ``oneshot-fl {run,sweep,standalone,diagnose,plotdata}``.

Exit codes: 0 ok, 2 config error, 3 runtime divergence, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import experiment as ex
from .data import load_csv
from .diagnostics import diagnose
from .numerics import InvalidInputError, load_vector
from .protocol import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING = 0, 2, 3, 4

log = logging.getLogger("oneshot_fl")


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config)
    if args.seed_override is not None:
        cfg = cfg.with_seed(args.seed_override)
    return cfg


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_run(args) -> int:
    cfg = _config(args)
    out = ex.resolve_out(cfg, args.out)
    bundle = ex.run_experiment(cfg, out)
    for label, v in bundle["variants"].items():
        line = [label]
        for proto, res in v["final"].items():
            line.append(f"{proto} loss={res['loss']:.6g}")
        if "divergence" in v:
            line.append(f"|eps|={v['divergence']['eps_norm']:.3e}")
        print("  ".join(line))
    if out is None:
        json.dump(bundle, sys.stdout, indent=2, sort_keys=True, default=ex._jsonable)
        print()
    else:
        print(f"wrote {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    sw = cfg.analysis["sweep"] if isinstance(cfg.analysis["sweep"], dict) else {}
    T_values = args.T or sw.get("T_values", [1, 2, 3, 4, 5])
    total = args.total_steps or sw.get("total_steps")
    seeds = args.seeds or [cfg.seed]
    results = ex.sweep_experiment(cfg, T_values, total, seeds, jobs=args.jobs)
    out = ex.resolve_out(cfg, args.out)
    payload = {"manifest": ex.manifest(cfg), "T_values": T_values, "total_steps": total, "points": results}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ex._write_json(out / "sweep.json", payload)
        for point in results:
            for label, rows in point["variants"].items():
                path = out / f"rounds_{label}_seed{point['seed']}.csv"
                with open(path, "w") as fh:
                    fh.write("T,k,metric,grad_evals\n")
                    for r in rows:
                        fh.write(f"{r['T']},{r['k']},{r['metric']!r},{r['grad_evals']}\n")
        print(f"wrote {out}")
    else:
        json.dump(payload, sys.stdout, indent=2, sort_keys=True, default=ex._jsonable)
        print()
    return EXIT_OK


def cmd_standalone(args) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else ex.resolve_out(_config(args), args.out)
    if run_dir is None:
        raise ex.MissingArtifactError("standalone needs --run-dir or a config with an output directory")
    result = ex.standalone_eval(run_dir)
    for label, rows in result.items():
        with open(run_dir / f"standalone_{label}.csv", "w") as fh:
            fh.write("client,metric\n")
            for r in rows:
                fh.write(f"{r['client']},{r['metric']!r}\n")
        print(label, " ".join(f"{r['client']}={r['metric']:.4f}" for r in rows))
    return EXIT_OK


def _batch_from_manifest(path: Path):
    """Model and batch described by a diagnose manifest (schema in the README)."""
    if not path.exists():
        raise ex.MissingArtifactError(f"batch manifest not found: {path}")
    man = json.loads(path.read_text())
    spec = dict(man["model"])
    spec.setdefault("label", "diagnose")
    data = man.get("data")
    if data is None:
        batch = None
    elif "csv" in data:
        csv_path = path.parent / data["csv"]
        if not csv_path.exists():
            raise ex.MissingArtifactError(f"batch data not found: {csv_path}")
        batch = load_csv(csv_path, task=data.get("task", "regression"))
    else:
        syn = dict(data["synthetic"])
        batch = ex.gen_synthetic(syn.pop("task"), syn.pop("n"), syn.pop("d"), **syn)
    if batch is not None and "rows" in man:
        batch = batch.take(man["rows"])
    kind = spec["kind"]
    if kind == "logistic":
        model = ex.LogisticModel(spec["d_in"])
    elif kind == "mlp":
        model = ex.MLPModel(spec["d_in"], spec["hidden"], loss=spec.get("loss", "logistic"),
                            parametrization=spec.get("parametrization", "standard"))
    elif kind == "quadratic":
        model = ex.QuadraticModel(spec["center"], spec.get("curvature"))
    else:
        raise ex.ConfigError(f"model.kind: unknown kind {kind!r}")
    return model, batch, man


def cmd_diagnose(args) -> int:
    for p in (args.a, args.b):
        if not Path(p).exists():
            raise ex.MissingArtifactError(f"checkpoint not found: {p}")
    model, batch, man = _batch_from_manifest(Path(args.batch))
    rep = diagnose(model, load_vector(args.a), load_vector(args.b), batch,
                   T=man.get("T", 1), k=man.get("k", 1), m=man.get("m", 1),
                   include_m=man.get("include_m", False), label=man.get("label", ""))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        rep.write(args.out)
    print(json.dumps(rep.to_json(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_plotdata(args) -> int:
    bundle = ex.load_bundle(args.run_dir)
    written = ex.emit_plotdata(bundle, args.figure, args.out or args.run_dir)
    for p in written:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oneshot-fl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment YAML")
        p.add_argument("--out", help="output directory (overrides config and $%s)" % ex.OUT_ENV)
        p.add_argument("--seed-override", type=int, help="replace the config's master seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for independent points")

    p = sub.add_parser("run", help="run every model variant of a config")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="round sweep at a fixed per-client step budget")
    common(p)
    p.add_argument("--T", type=_int_list, help="comma-separated round counts, e.g. 1,2,3,4,5")
    p.add_argument("--total-steps", type=int)
    p.add_argument("--seeds", type=_int_list, help="comma-separated master seeds")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("standalone", help="score saved local models vs the global model")
    common(p, config_required=False)
    p.add_argument("--run-dir", help="directory of a finished run")
    p.set_defaults(func=cmd_standalone)

    p = sub.add_parser("diagnose", help="L, tau and bound for a checkpoint pair")
    p.add_argument("--a", required=True, help="first checkpoint (usually w0)")
    p.add_argument("--b", required=True, help="second checkpoint")
    p.add_argument("--batch", required=True, help="JSON batch manifest")
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("plotdata", help="emit CSV plot data from a finished run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--figure", required=True, choices=ex.FIGURES)
    p.add_argument("--out", help="directory for the CSVs (default: the run directory)")
    p.set_defaults(func=cmd_plotdata)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ex.MissingArtifactError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InvalidInputError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
