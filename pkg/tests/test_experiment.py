import csv
import json
from pathlib import Path

import numpy as np
import pytest

from oneshot_fl import experiment as ex
from oneshot_fl.diagnostics import compose_bound
from oneshot_fl.numerics import InvalidInputError
from oneshot_fl.protocol import run_oneshot

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SHIPPED = sorted(p.name for p in CONFIGS.glob("*.yaml"))


def _write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _quad_cfg(**fl):
    raw = ex.load_config_file(CONFIGS / "quadratic_zero_eps.yaml")
    raw["fl"].update(fl)
    return raw


@pytest.mark.parametrize(
    "fl, needle",
    [
        ({"p": [0.5, 0.5, 0.5, 0.5]}, "fl.p: scaling factors must sum to 1"),
        ({"k": 0}, "fl.k: local steps per round must be >= 1"),
        ({"T": 0}, "fl.T: number of rounds must be >= 1"),
        ({"mode": "one-shot", "T": 3}, "fl.T: one-shot mode runs a single round"),
    ],
)
def test_config_validation_messages(fl, needle):
    with pytest.raises(ex.ConfigError) as err:
        ex.validate(_quad_cfg(**fl))
    assert needle in str(err.value)


def test_config_messages_are_distinct():
    msgs = set()
    for fl in ({"p": [0.4, 0.4, 0.4, 0.4]}, {"k": 0}, {"T": 0}, {"mode": "one-shot", "T": 2}):
        with pytest.raises(ex.ConfigError) as err:
            ex.validate(_quad_cfg(**fl))
        msgs.add(str(err.value).split(",")[0])
    assert len(msgs) == 4


def test_config_other_errors(tmp_path):
    with pytest.raises(ex.ConfigError, match="models"):
        ex.validate({"models": []})
    with pytest.raises(ex.ConfigError, match="not found"):
        ex.load_config(tmp_path / "nope.yaml")
    with pytest.raises(ex.ConfigError, match="include cycle"):
        ex.load_config(_write(tmp_path, "include: [c.yaml]\n"))


def test_includes_merge_in_order(tmp_path):
    _write(tmp_path, "data: {d: 3, n: 10}\nfl: {m: 2}\n", "base.yaml")
    cfg = ex.load_config(_write(tmp_path, "include: [base.yaml]\ndata: {n: 20}\nmodels: [{label: q, kind: quadratic}]\n"))
    assert cfg.data["d"] == 3 and cfg.data["n"] == 20 and cfg.fl["m"] == 2


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_validate(name):
    cfg = ex.load_config(CONFIGS / name)
    assert cfg.models


def test_quadratic_zero_eps_config():
    bundle = ex.run_experiment(ex.load_config(CONFIGS / "quadratic_zero_eps.yaml"))
    assert bundle["variants"]["quadratic-shared"]["divergence"]["eps_norm"] < 1e-10
    assert bundle["variants"]["quadratic-heterogeneous"]["divergence"]["eps_norm"] > 1e-3


def test_fm_vs_small_bound_ordering():
    v = ex.run_experiment(ex.load_config(CONFIGS / "fm_vs_small.yaml"))["variants"]
    assert v["wide-pretrained"]["divergence"]["bound_value"] < v["narrow-random"]["divergence"]["bound_value"]
    assert v["wide-pretrained"]["divergence"]["eps_norm"] < v["narrow-random"]["divergence"]["eps_norm"]


def test_rerun_is_byte_identical_and_manifest_roundtrip(tmp_path):
    cfg = ex.load_config(CONFIGS / "fm_vs_small.yaml")
    ex.run_experiment(cfg, tmp_path / "a")
    ex.run_experiment(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.json").read_bytes()
    assert a == (tmp_path / "b" / "metrics.json").read_bytes()
    ex.rerun_from_manifest(tmp_path / "a", tmp_path / "c")
    assert a == (tmp_path / "c" / "metrics.json").read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["config_sha256"] == cfg.digest() and man["seed"] == 0
    assert "numpy" in man["versions"]


def test_seed_changes_results():
    cfg = ex.load_config(CONFIGS / "quadratic_zero_eps.yaml")
    a = ex.run_experiment(cfg)["variants"]["quadratic-heterogeneous"]["final"]
    b = ex.run_experiment(cfg.with_seed(1))["variants"]["quadratic-heterogeneous"]["final"]
    assert a != b


def test_output_env_override(tmp_path, monkeypatch):
    cfg = ex.load_config(CONFIGS / "quadratic_zero_eps.yaml")
    monkeypatch.setenv(ex.OUT_ENV, str(tmp_path))
    assert ex.resolve_out(cfg, None) == tmp_path / "quadratic_zero_eps"
    assert ex.resolve_out(cfg, "x") == Path("x")


def _setup(name="round_sweep.yaml", seed=0):
    cfg = ex.load_config(CONFIGS / name).with_seed(seed)
    train, test, _ = ex.build_data(cfg)
    return ex.build_variant(cfg, cfg.models[0], train, test)


def test_sweep_T1_equals_oneshot_and_parity():
    setup = _setup()
    rows = ex.sweep_rounds(setup, [1, 2, 3], 12, "accuracy")
    w_one, _ = run_oneshot(setup.fl.with_rounds(1, 12).as_oneshot(), setup.fed)
    assert rows[0]["metric"] == ex.score(setup, w_one, "accuracy")
    assert len({r["grad_evals"] for r in rows}) == 1


def test_sweep_indivisible_names_T():
    with pytest.raises(InvalidInputError, match="T=4"):
        ex.sweep_rounds(_setup(), [1, 2, 4], 10, "accuracy")


def test_sweep_unimodal_over_seeds():
    cfg = ex.load_config(CONFIGS / "round_sweep.yaml")
    points = ex.sweep_experiment(cfg, [1, 2, 3, 4, 5], 60, range(10))
    curves = [[r["metric"] for r in pt["variants"]["wide-pretrained"]] for pt in points]
    assert all(ex.unimodal_within(c, 0.05) for c in curves)


def test_sweep_jobs_match_serial():
    cfg = ex.load_config(CONFIGS / "round_sweep.yaml")
    assert ex.sweep_experiment(cfg, [1, 2], 8, [0, 1], jobs=2) == ex.sweep_experiment(cfg, [1, 2], 8, [0, 1])


@pytest.mark.parametrize(
    "values, expect",
    [([1, 2, 3, 2, 1], True), ([3, 2, 1], True), ([1, 3, 1, 3, 1], False), ([10, 9.8, 10, 9.9], True)],
)
def test_unimodal_within(values, expect):
    assert ex.unimodal_within(values, 0.05) is expect


def test_standalone_single_client():
    raw = ex.load_config_file(CONFIGS / "standalone_10.yaml")
    raw["fl"]["m"] = 1
    raw["partition"]["strategy"] = "iid"
    v = ex.run_experiment(ex.validate(raw))["variants"]["wide-pretrained"]["standalone"]
    assert len(v) == 2 and v[0]["metric"] == v[1]["metric"]


def test_standalone_ten_clients(tmp_path):
    cfg = ex.load_config(CONFIGS / "standalone_10.yaml")
    bundle = ex.run_experiment(cfg, tmp_path)
    var = bundle["variants"]["wide-pretrained"]
    rows = ex.standalone_eval(tmp_path)["wide-pretrained"]
    assert rows == var["standalone"]
    assert len(rows) == cfg.fl["m"] + 1
    local = np.mean([r["metric"] for r in rows[:-1]])
    glob = rows[-1]["metric"]
    assert local <= glob + 0.05 * abs(glob - var["init"]["neg_loss"])


def test_standalone_missing_artifacts(tmp_path):
    with pytest.raises(ex.MissingArtifactError):
        ex.standalone_eval(tmp_path)
    ex.run_experiment(ex.load_config(CONFIGS / "standalone_10.yaml"), tmp_path)
    (tmp_path / "checkpoints" / "wide-pretrained_oneshot_local003.vec").unlink()
    with pytest.raises(ex.MissingArtifactError, match="local003"):
        ex.standalone_eval(tmp_path)


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_plotdata_smoothness_and_bound(tmp_path):
    bundle = ex.run_experiment(ex.load_config(CONFIGS / "fm_vs_small.yaml"), tmp_path)
    (f2,) = ex.emit_plotdata(bundle, "smoothness", tmp_path)
    assert _rows(f2)[0] == ["model_label", "L_hat", "tau_hat", "w0_norm"]
    (f4,) = ex.emit_plotdata(bundle, "bound", tmp_path)
    rows = _rows(f4)
    for r in rows[1:]:
        dg = bundle["variants"][r[0]]["diagnostics"]
        gamma, lg = compose_bound(float(r[1]), float(r[2]), dg["T"], dg["k"], dg["m"], float(r[4]), dg["include_m"])
        assert gamma == float(r[5]) == dg["gamma_w0"]
        assert lg == float(r[6])


def test_plotdata_incremental_matches_snapshots(tmp_path):
    bundle = ex.run_experiment(ex.load_config(CONFIGS / "async_incremental.yaml"), tmp_path)
    (f6,) = ex.emit_plotdata(bundle, "incremental", tmp_path)
    rows = _rows(f6)
    assert rows[0] == ["arrival_index", "client_id", "metric"]
    snaps = bundle["variants"]["wide-pretrained"]["async"]["snapshots"]
    assert [int(r[1]) for r in rows[1:]] == list(range(10))
    assert [float(r[2]) for r in rows[1:]] == [s["metric"] for s in snaps]


def test_async_final_matches_sync():
    a = ex.run_experiment(ex.load_config(CONFIGS / "async_incremental.yaml"))["variants"]["wide-pretrained"]["async"]
    assert a["final_vs_sync_rel_diff"] < 1e-12
    assert a["snapshots"][-1]["metric"] == pytest.approx(a["sync_metric"], rel=1e-9)


def test_plotdata_missing_analysis_names_toggle():
    bundle = ex.run_experiment(ex.load_config(CONFIGS / "quadratic_zero_eps.yaml"))
    with pytest.raises(ex.MissingArtifactError, match="analysis.diagnostics"):
        ex.emit_plotdata(bundle, "smoothness", "/tmp/unused")
    with pytest.raises(ex.MissingArtifactError, match="analysis.sweep"):
        ex.emit_plotdata(bundle, "rounds", "/tmp/unused")
    with pytest.raises(InvalidInputError):
        ex.emit_plotdata(bundle, "no-such-figure", "/tmp/unused")


def test_lowrank_variant_is_smaller_payload():
    v = ex.run_experiment(ex.load_config(CONFIGS / "lowrank_vs_full.yaml"))["variants"]
    assert v["lowrank"]["comm_cost"]["payload_bytes"] < v["full"]["comm_cost"]["payload_bytes"]
    assert v["lowrank"]["tau_effective"] <= v["full"]["tau_effective"]
