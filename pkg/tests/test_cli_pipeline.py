import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from evdistill import cli, pipeline
from evdistill.config import ConfigError, config_from_dict, default_config, load_config, merge, parse_overrides
from evdistill.distill import StudentModel
from evdistill.teacher import TeacherEnsemble, train_member
from evdistill.data import SyntheticSpec, make_synthetic

SMALL_TOML = """
seed = 3

[data]
n_samples = 800
dim = 6

[teacher]
n_members = 3
hidden = [8]
epochs = 6

[distill]
max_epochs = 4

[bench]
repeats = 2

[sweep]
grid = [2, 10, 100]
"""


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "small.toml"
    cfg_path.write_text(SMALL_TOML)
    out = root / "run"
    assert cli.main(["pipeline", "--config", str(cfg_path), "--out", str(out)]) == 0
    return cfg_path, out


# ---------------------------------------------------------------- config


def test_toml_and_json_configs_agree(tmp_path, small):
    cfg_path, _ = small
    cfg = load_config(cfg_path)
    assert cfg.seed == 3 and cfg.teacher.hidden == (8,) and cfg.sweep.grid == (2, 10, 100)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json").digest() == cfg.digest()


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        config_from_dict({"teacher": {"bogus": 1}})
    with pytest.raises(ConfigError, match="nope"):
        config_from_dict({"nope": {}})


def test_validation_rules():
    with pytest.raises(ConfigError):
        config_from_dict({"data": {"fractions": [0.5, 0.5, 0.5]}})
    with pytest.raises(ConfigError):
        config_from_dict({"data": {"fractions": [0.7, 0.0, 0.3]}})
    assert config_from_dict({"data": {"fractions": [0.7, 0.0, 0.3]}, "teacher": {"val_overlaps_train": True}})
    with pytest.raises(ConfigError):
        config_from_dict({"distill": {"heads": ["gaussian"]}})


def test_overrides():
    cfg = merge(default_config(), parse_overrides(["distill.lr=0.001", "teacher.hidden=[4, 4]", "data.format=csv"]))
    assert cfg.distill.lr == 0.001 and cfg.teacher.hidden == (4, 4) and cfg.data.format == "csv"
    with pytest.raises(ConfigError):
        parse_overrides(["lr=0.1"])
    with pytest.raises(ConfigError):
        merge(default_config(), {"nosuch": {"a": 1}})


# -------------------------------------------------------------------- cli


def test_dry_run_prints_plan_and_writes_nothing(tmp_path, capsys):
    out = tmp_path / "dry"
    assert cli.main(["distill", "--out", str(out), "--dry-run", "--seed", "7"]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["stages"] == ["students"] and plan["config"]["seed"] == 7
    assert not out.exists()


@pytest.mark.parametrize(
    "argv, code",
    [
        (["eval", "--set", "distill.nonsense=1", "--dry-run"], 2),
        (["simplex-grid", "--alpha", "1,2", "--dry-run"], 2),
        (["simplex-grid", "--alpha", "a,b,c"], 2),
        (["fit-teacher"], 3),
    ],
)
def test_exit_codes(tmp_path, argv, code, capsys):
    assert cli.main(argv + ["--out", str(tmp_path / "o")]) == code
    assert "evdistill: error:" in capsys.readouterr().err


def test_bad_config_file_is_exit_2(tmp_path):
    (tmp_path / "bad.toml").write_text("[teacher\n")
    assert cli.main(["make-data", "--config", str(tmp_path / "bad.toml"), "--dry-run"]) == 2
    assert cli.main(["make-data", "--config", str(tmp_path / "missing.toml"), "--dry-run"]) == 2


def test_log_level_env(monkeypatch, tmp_path):
    monkeypatch.setenv("EVDISTILL_LOG", "loud")
    assert cli.main(["make-data", "--dry-run"]) == 2
    monkeypatch.setenv("EVDISTILL_LOG", "debug")
    assert cli.main(["make-data", "--dry-run"]) == 0


def test_module_entry_point_version():
    res = subprocess.run([sys.executable, "-m", "evdistill", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("evdistill ")


def test_simplex_grid_command(tmp_path):
    out = tmp_path / "sg"
    assert cli.main(["simplex-grid", "--alpha", "5,1,1", "--resolution", "12", "--out", str(out)]) == 0
    rows = read_csv(out / "simplex" / "grid.csv")
    assert len(rows) == 55 and set(rows[0]) == {"p1", "p2", "p3", "density"}
    assert (out / "simplex" / "manifest.json").exists()


# --------------------------------------------------------------- pipeline


def test_every_stage_dir_has_one_manifest(small):
    _, out = small
    for stage in pipeline.STAGES:
        assert [p.name for p in (out / stage).glob("manifest*.json")] == ["manifest.json"]
        m = json.loads((out / stage / "manifest.json").read_text())
        assert {"command", "config_hash", "seed", "inputs", "outputs", "tool_version", "wall_clock_seconds"} <= set(m)


def test_rerun_is_noop_and_force_reruns(small, capsys):
    cfg_path, out = small
    capsys.readouterr()
    assert cli.main(["pipeline", "--config", str(cfg_path), "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == len(pipeline.STAGES) and all("up to date" in l for l in lines)
    assert cli.main(["bench", "--config", str(cfg_path), "--out", str(out), "--force"]) == 0
    assert "done in" in capsys.readouterr().out


def test_changed_section_reruns_only_downstream(small, tmp_path):
    cfg_path, out = small
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    cfg = merge(load_config(cfg_path), {"sweep": {"grid": [3, 30]}})
    res = {r.stage: r.skipped for r in pipeline.run_pipeline(cfg, copy)}
    assert res == {"data": True, "teacher": True, "students": True, "eval": True, "ood": True, "bench": True, "sweep": False}


def test_eval_report_contents(small):
    _, out = small
    rep = json.loads((out / "eval" / "report.json").read_text())
    models = rep["models"]
    assert set(models) == {"teacher", "student_softmax", "student_evidential", "untrained_softmax", "untrained_evidential"}
    for r in models.values():
        assert set(r) >= {"accuracy", "ece", "nll", "brier", "n_samples", "bins"}
        assert 0 <= r["accuracy"] <= 1 and 0 <= r["ece"] <= 1
    assert models["teacher"]["accuracy"] > 0.9
    assert rep["n_samples"] == sum(b["count"] for b in models["teacher"]["bins"])


def test_eval_twice_identical(small, tmp_path):
    _, out = small
    first = (out / "eval" / "report.json").read_bytes()
    cfg_path = small[0]
    pipeline.run_eval(load_config(cfg_path), out, force=True)
    assert (out / "eval" / "report.json").read_bytes() == first


def test_traces_and_restored_nll(small):
    _, out = small
    summary = json.loads((out / "students" / "summary.json").read_text())
    for head in ("softmax", "evidential"):
        rows = read_csv(out / "students" / f"trace_{head}.csv")
        epochs = [int(r["epoch"]) for r in rows]
        assert epochs == list(range(1, len(rows) + 1))
        assert summary[head]["best_nll"] == min(float(r["nll"]) for r in rows)


def test_ood_report(small):
    _, out = small
    rep = json.loads((out / "ood" / "report.json").read_text())
    assert rep["student_softmax"]["ood"]["aleatoric"] == {"mean": None, "w1": None, "auroc": None}
    for model in ("teacher", "student_evidential"):
        fresh = rep[model]["id_fresh"]["total"]
        assert fresh["w1"] < 0.01 and abs(fresh["auroc"] - 0.5) <= 0.05
    ev = rep["student_evidential"]
    assert ev["ood"]["total"]["mean"] > ev["id"]["total"]["mean"]
    assert rep["teacher"]["ood"]["epistemic"]["mean"] > rep["teacher"]["id"]["epistemic"]["mean"]
    assert (out / "ood" / "hist_student_evidential_epistemic.csv").exists()
    assert not (out / "ood" / "hist_student_softmax_epistemic.csv").exists()


def test_bench_counts(small):
    _, out = small
    rep = json.loads((out / "bench" / "report.json").read_text())
    m = rep["n_samples"]
    assert rep["teacher_forward_passes"] == rep["n_members"] * m
    assert all(s["forward_passes"] == m for s in rep["students"].values())


def test_student_heads_cost_the_same(small):
    _, out = small
    models = pipeline.load_models(out)
    X = np.tile(pipeline._load_split(out, "test").X, (400, 1))
    heads = [models["student_softmax"].predict_proba, models["student_evidential"].predict_proba]
    for f in heads:
        f(X)  # warm up allocations
    # time the heads back to back in each round so machine load hits both alike
    ratios = []
    for _ in range(15):
        soft, evid = (pipeline.time_inference(f, X, 3) for f in heads)
        ratios.append(soft / evid)
    ratio = float(np.median(ratios))
    assert abs(ratio - 1) <= 0.1, ratio


def test_sweep_outputs(small):
    _, out = small
    rows = read_csv(out / "sweep" / "sweep.csv")
    assert [r["alpha0"] for r in rows] == ["2.0", "10.0", "100.0", "learned"]
    # accuracy, ECE, NLL and Brier only see the mean, so every row matches the learned one
    for key in ("accuracy", "ece", "nll", "brier"):
        assert len({r[key] for r in rows}) == 1
    epi = [float(r["mean_epistemic"]) for r in rows[:-1]]
    assert epi == sorted(epi, reverse=True)
    hist = read_csv(out / "sweep" / "alpha0_hist.csv")
    assert sum(int(r["count"]) for r in hist) == len(pipeline._load_split(out, "test"))


def test_single_member_teacher_weight_is_one(tmp_path):
    cfg = merge(default_config(), {"data": {"n_samples": 300, "dim": 4}, "teacher": {"n_members": 1, "epochs": 2, "hidden": [4]}})
    pipeline.run_pipeline(cfg, tmp_path, stages=("data", "teacher"))
    assert json.loads((tmp_path / "teacher" / "weights.json").read_text())["weights"] == [1.0]


def test_duplicate_members_get_equal_weights():
    ds = make_synthetic(SyntheticSpec(dim=4, n_samples=200, seed=0))
    m = train_member(ds.X, ds.y, 2, seed=1, hidden=(4,), epochs=2)
    t = TeacherEnsemble([m, m, m])
    w = t.fit_weights(ds.X, ds.y)
    assert np.array_equal(w, np.full(3, 1 / 3))


def test_teacher_rerun_same_seed_identical_weights(small, tmp_path):
    cfg_path, out = small
    cfg = load_config(cfg_path)
    pipeline.run_pipeline(cfg, tmp_path, stages=("data", "teacher"))
    assert pipeline.sha256_file(tmp_path / "teacher" / "weights.json") == pipeline.sha256_file(out / "teacher" / "weights.json")


def test_missing_ood_set_is_data_error(tmp_path):
    rng = np.random.default_rng(0)
    lines = ["id,y,f0,f1"] + [f"r{i},{i % 2},{rng.normal() + 3 * (i % 2)},{rng.normal()}" for i in range(200)]
    (tmp_path / "in.csv").write_text("\n".join(lines) + "\n")
    cfg = merge(
        default_config(),
        {"data": {"path": str(tmp_path / "in.csv")}, "teacher": {"n_members": 2, "epochs": 2, "hidden": [4]}, "distill": {"max_epochs": 1}},
    )
    out = tmp_path / "run"
    pipeline.run_pipeline(cfg, out, stages=("data", "teacher", "students", "eval"))
    assert json.loads((out / "eval" / "report.json").read_text())["n_samples"] == len(pipeline._load_split(out, "test"))
    with pytest.raises(pipeline.DataError, match="no OOD dataset"):
        pipeline.run_ood(cfg, out)


def test_student_bundle_loads(small):
    _, out = small
    s = StudentModel.load(out / "students" / "student_evidential.json")
    assert s.head == "evidential" and s.net.n_trainable() > 0
