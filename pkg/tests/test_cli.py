import json

import numpy as np
import pytest

from ibrtwin.armax import load_model, save_model
from ibrtwin.cli import main
from ibrtwin.monitor import EventKind, read_event_log
from ibrtwin.sim import (
    FAULT_DIPS,
    CoefficientStep,
    LinearTruth,
    PlantKind,
    Prbs,
    ScenarioConfig,
    generate_event_suite,
    simulate,
    truth_model,
)
from ibrtwin.timeseries import ingest_csv

TRUTH = LinearTruth(alpha=(0.5,), gamma=((1.0, 0.5),), nk=1)
ROLES = {"inputs": ["u1"], "outputs": ["y1"]}


def run(tmp_path, command, cfg, out, *extra):
    """Write ``cfg`` next to ``tmp_path`` and invoke the CLI; relative paths resolve against ``tmp_path``."""
    path = tmp_path / f"{command}-{out.name}.json"
    path.write_text(json.dumps(cfg))
    return main([command, "--config", str(path), "--out", str(out), *extra])


def truth_scenario(duration=5.0, change=None, seed=3):
    events = [Prbs("u1")] + ([CoefficientStep(change, alpha=(0.8,))] if change is not None else [])
    return ScenarioConfig.default(
        PlantKind.LINEAR_TRUTH, plant=TRUTH, duration=duration, events=tuple(events), rng_seed=seed, name="truth"
    ).to_dict()


@pytest.fixture
def truth_pipeline(tmp_path):
    """Simulated LinearTruth data plus a batch ELS model fitted on it via the CLI."""
    assert run(tmp_path, "simulate", {"scenario": truth_scenario()}, tmp_path / "sim") == 0
    data = tmp_path / "sim" / "truth.csv"
    fit_cfg = {"train": str(data), "roles": ROLES, "orders": {"na": 1, "nb": 2, "nc": 0, "nk": 1}}
    assert run(tmp_path, "fit", fit_cfg, tmp_path / "fit") == 0
    return data, tmp_path / "fit" / "model.json"


def test_simulate_gfm_suite(tmp_path):
    base = ScenarioConfig.default(PlantKind.GFM, duration=1.0).to_dict()
    out = tmp_path / "gfm"
    assert run(tmp_path, "simulate", {"scenario": base, "count": 25, "seed": 7}, out, "--jobs", "2") == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["plant_kind"] == "GFM" and len(manifest["files"]) == 25
    assert len({f["seed"] for f in manifest["files"]}) == 25
    assert sorted(p.name for p in out.glob("*.csv")) == [f"gfm-{i:03d}.csv" for i in range(25)]
    head = (out / "gfm-000.csv").read_text().splitlines()[:2]
    assert head == ["# seed=7", f"# config_hash={manifest['provenance']['config_hash']}"]
    d = ingest_csv(out / "gfm-000.csv", {"inputs": ["P", "Q"], "outputs": ["V", "f"]})
    assert (d.n_inputs, d.n_outputs, d.sample_period) == (2, 2, pytest.approx(1e-3))


def test_simulate_emt_suite_covers_fault_dips(tmp_path):
    base = ScenarioConfig.default(PlantKind.EMT_DIP, duration=0.3)
    out = tmp_path / "emt"
    assert run(tmp_path, "simulate", {"scenario": base.to_dict(), "count": 4, "seed": 1}, out) == 0
    roles = {"inputs": ["v"], "outputs": ["i_HVAC", "i_PV", "i_EV"]}
    for i, sc in enumerate(generate_event_suite(base, 4, 1)):
        assert sc.events[-1] == FAULT_DIPS[i]
        got = ingest_csv(out / f"{sc.name}.csv", roles)
        np.testing.assert_array_equal(got.outputs, simulate(sc).outputs)


def test_refuses_to_overwrite_without_force(tmp_path, capsys):
    cfg = {"scenario": truth_scenario(duration=0.5)}
    out = tmp_path / "sim"
    assert run(tmp_path, "simulate", cfg, out) == 0
    before = (out / "truth.csv").read_bytes()
    cfg["scenario"]["rng_seed"] = 99
    assert run(tmp_path, "simulate", cfg, out, "--seed", "99") == 1
    assert "--force" in capsys.readouterr().err
    assert (out / "truth.csv").read_bytes() == before
    assert run(tmp_path, "simulate", cfg, out, "--seed", "99", "--force") == 0
    assert (out / "truth.csv").read_bytes() != before


def test_fit_recovers_linear_truth(truth_pipeline):
    _, model_path = truth_pipeline
    model = load_model(model_path)
    phys = model.physical_coefficients()
    assert (model.n_inputs, model.n_outputs) == (1, 1)
    np.testing.assert_allclose(phys["alpha"][0], TRUTH.alpha, atol=0.02)
    np.testing.assert_allclose(phys["gamma"][0, 0], TRUTH.gamma[0], atol=0.02)
    assert model.metadata["provenance"]["seed"] == 0
    report = json.loads((model_path.parent / "fit_report.json").read_text())
    assert report["converged"] and report["training_file"] == "truth.csv"


def test_fit_missing_channel_is_a_usage_error(tmp_path, truth_pipeline, capsys):
    data, _ = truth_pipeline
    cfg = {"train": str(data), "roles": {"inputs": ["u1", "u2"], "outputs": ["y1"]},
           "orders": {"na": 1, "nb": 1}}
    assert run(tmp_path, "fit", cfg, tmp_path / "bad") == 1
    assert "column 'u2' not found" in capsys.readouterr().err


def test_fit_without_convergence_exits_2(tmp_path, truth_pipeline):
    data, _ = truth_pipeline
    cfg = {"train": str(data), "roles": ROLES, "orders": {"na": 1, "nb": 2, "nc": 1, "nk": 1},
           "fit": {"max_els_iterations": 1}}
    assert run(tmp_path, "fit", cfg, tmp_path / "nc") == 2
    assert json.loads((tmp_path / "nc" / "manifest.json").read_text())["converged"] is False


def test_fit_picks_the_richest_training_event(tmp_path):
    base = ScenarioConfig.default(PlantKind.GFM, duration=1.0).to_dict()
    assert run(tmp_path, "simulate", {"scenario": base, "count": 3, "seed": 2}, tmp_path / "sim") == 0
    files = sorted(str(p) for p in (tmp_path / "sim").glob("*.csv"))
    cfg = {"train": files, "roles": {"inputs": ["P", "Q"], "outputs": ["V", "f"]},
           "orders": {"na": 2, "nb": 2, "nc": 0}}
    assert run(tmp_path, "fit", cfg, tmp_path / "fit") == 0
    model = load_model(tmp_path / "fit" / "model.json")
    assert (model.n_inputs, model.n_outputs) == (2, 2)
    assert model.metadata["training_file"] in {p.rsplit("/", 1)[-1] for p in files}


def read_predictions(path):
    rows = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return np.genfromtxt(rows, delimiter=",", names=True)


def test_validate_in_sample_and_measured_until(tmp_path, truth_pipeline):
    data, model_path = truth_pipeline
    held = tmp_path / "held"
    assert run(tmp_path, "simulate", {"scenario": truth_scenario(seed=8)}, held) == 0
    cfg = {"model": str(model_path), "data": [str(data), str(held / "truth.csv")]}
    (held / "truth.csv").rename(held / "heldout.csv")
    cfg["data"][1] = str(held / "heldout.csv")
    assert run(tmp_path, "validate", cfg, tmp_path / "val") == 0
    report = json.loads((tmp_path / "val" / "report.json").read_text())
    assert report["n_scenarios"] == 2 and report["meta"]["mode"] == "measured"
    own = next(s for s in report["scenarios"] if s["scenario"] == "truth")
    assert own["channels"]["y1"]["nrmse_pct"] < 1.0
    pred = (tmp_path / "val" / "predictions" / "truth.csv").read_text().splitlines()
    assert [ln for ln in pred if not ln.startswith("#")][0] == "t,y1,y1_hat"
    assert (tmp_path / "val" / "boxplot.csv").read_text().startswith("channel,scenario,mean_rmse,nrmse_pct")

    out = tmp_path / "until"
    assert run(tmp_path, "validate", cfg, out, "--mode", "measured-until:300") == 0
    assert json.loads((out / "manifest.json").read_text())["mode"] == "measured-until:300"
    measured = read_predictions(tmp_path / "val" / "predictions" / "truth.csv")
    until = read_predictions(out / "predictions" / "truth.csv")
    np.testing.assert_array_equal(until["y1_hat"][:301], measured["y1_hat"][:301])
    assert np.any(until["y1_hat"][301:] != measured["y1_hat"][301:])


def test_validate_channel_mismatch(tmp_path, truth_pipeline, capsys):
    _, model_path = truth_pipeline
    base = ScenarioConfig.default(PlantKind.GFL, duration=0.5, name="gfl").to_dict()
    assert run(tmp_path, "simulate", {"scenario": base}, tmp_path / "gfl") == 0
    cfg = {"model": str(model_path), "data": str(tmp_path / "gfl" / "gfl.csv"),
           "roles": {"inputs": ["V", "f"], "outputs": ["P", "Q"]}}
    assert run(tmp_path, "validate", cfg, tmp_path / "val") == 1
    assert "model expects 1 inputs/1 outputs" in capsys.readouterr().err


def test_monitor_regime_change_recalibrates(tmp_path, truth_pipeline):
    _, model_path = truth_pipeline
    assert run(tmp_path, "simulate", {"scenario": truth_scenario(10.0, change=5000, seed=4)}, tmp_path / "s") == 0
    cfg = {"model": str(model_path), "stream": str(tmp_path / "s" / "truth.csv")}
    out = tmp_path / "mon"
    assert run(tmp_path, "monitor", cfg, out) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["triggers"] >= 1 and summary["final_version"] >= 1
    assert summary["final_rmse"] < 0.05
    assert (out / "models" / "model_v0001.json").exists()
    events = read_event_log(out / "events.jsonl")
    first = next(ev for ev in events if ev.kind is EventKind.RECAL_TRIGGERED)
    assert first.index >= 5000


def test_monitor_clean_stream_exact_model(tmp_path):
    assert run(tmp_path, "simulate", {"scenario": truth_scenario(3.0)}, tmp_path / "s") == 0
    save_model(truth_model(TRUTH), tmp_path / "exact.json")
    cfg = {"model": str(tmp_path / "exact.json"), "stream": str(tmp_path / "s" / "truth.csv"),
           "monitor": {"window": 100, "recal_history": 500}}
    assert run(tmp_path, "monitor", cfg, tmp_path / "mon") == 0
    summary = json.loads((tmp_path / "mon" / "summary.json").read_text())
    assert summary["triggers"] == 0 and summary["final_version"] == 0


def blank_outputs_from(src, dst, start):
    lines = src.read_text().splitlines()
    body = [i for i, ln in enumerate(lines) if not ln.startswith("#")]
    for k, i in enumerate(body[1:]):
        if k >= start:
            lines[i] = lines[i].rsplit(",", 1)[0] + ","
    dst.write_text("\n".join(lines) + "\n")
    return dst


def test_monitor_feedback_lost_at_300(tmp_path, truth_pipeline):
    data, model_path = truth_pipeline
    stream = blank_outputs_from(data, tmp_path / "blank.csv", 300)
    cfg = {"model": str(model_path), "stream": str(stream), "monitor": {"window": 100, "recal_history": 500}}
    assert run(tmp_path, "monitor", cfg, tmp_path / "mon") == 0
    lost = [ev for ev in read_event_log(tmp_path / "mon" / "events.jsonl") if ev.kind is EventKind.FEEDBACK_LOST]
    assert [ev.index for ev in lost] == [300]


def test_monitor_stream_error_budget(tmp_path, truth_pipeline):
    data, model_path = truth_pipeline
    lines = data.read_text().splitlines()
    for i in (10, 20, 30):
        lines[i] = "garbage"
    stream = tmp_path / "bad.csv"
    stream.write_text("\n".join(lines) + "\n")
    cfg = {"model": str(model_path), "stream": str(stream), "error_budget": 3}
    assert run(tmp_path, "monitor", cfg, tmp_path / "ok") == 0
    errs = [ev for ev in read_event_log(tmp_path / "ok" / "events.jsonl") if ev.kind is EventKind.STREAM_ERROR]
    assert len(errs) == 3
    cfg["error_budget"] = 2
    assert run(tmp_path, "monitor", cfg, tmp_path / "abort") == 1


def test_bad_config_exits_1(tmp_path, capsys):
    assert run(tmp_path, "simulate", {"count": 3}, tmp_path / "x") == 1
    assert "missing required field 'scenario'" in capsys.readouterr().err
    assert main(["fit", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "y")]) == 1


def _normalized(path):
    if path.suffix != ".json":
        return path.read_bytes()
    doc = json.loads(path.read_text())
    if path.name == "manifest.json":
        doc.pop("metadata")
    if isinstance(doc.get("metadata"), dict):
        doc["metadata"].pop("timestamps", None)
    return doc


def pipeline(root):
    """Full simulate/fit/validate/monitor run driven by configs with relative paths."""
    root.mkdir()
    assert run(root, "simulate", {"scenario": truth_scenario(6.0, change=3000)}, root / "sim") == 0
    data = "sim/truth.csv"
    fit = {"train": data, "roles": ROLES, "orders": {"na": 1, "nb": 2, "nc": 1, "nk": 1}}
    assert run(root, "fit", fit, root / "fit") in (0, 2)
    model = "fit/model.json"
    assert run(root, "validate", {"model": model, "data": data}, root / "val") == 0
    mon = {"model": model, "stream": data, "monitor": {"recal_method": "BatchEls"}}
    assert run(root, "monitor", mon, root / "mon") == 0
    return {p.relative_to(root): _normalized(p) for p in sorted(root.rglob("*")) if p.is_file()}


def test_rerun_is_bit_exact_and_stamped(tmp_path):
    first, second = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    assert first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], name
    manifests = [doc for name, doc in first.items() if name.name == "manifest.json"]
    assert len(manifests) == 4 and all("config_hash" in m["provenance"] for m in manifests)
    for name, doc in first.items():
        if name.suffix == ".csv" and name.parts[-2] in ("sim", "predictions"):
            assert doc.startswith(b"# seed=")
    assert first[next(n for n in first if n.name == "model.json")]["metadata"]["provenance"]["seed"] == 0
    mon_model = first[next(n for n in first if n.name == "model_v0001.json")]
    assert "provenance" in mon_model["metadata"]
    log = (tmp_path / "a" / "mon" / "events.jsonl").read_text().splitlines()
    assert all('"config_hash"' in ln and '"seed": 0' in ln for ln in log)
