import csv
import json

import numpy as np
import pytest

from rimae.cli import main
from rimae.config import Config, config_from_dict, desk_config, dump_config, load_config, full_config
from rimae.io import (
    load_checkpoint,
    load_dataset,
    read_labels,
    read_ripc,
    read_xyz,
    save_checkpoint,
    write_labels,
    write_ripc,
    write_xyz,
)
from rimae.validation import check_point_cloud, check_point_clouds
from rimae.exceptions import DimensionError

TINY = {
    "model": {"dim": 16, "depth": 1, "heads": 2, "g": 8, "k": 8},
    "optim": {"steps": 4, "batch": 4, "warmup_epochs": 0.5},
    "probe": {"epochs": 20, "hidden": 0},
}


# ------------------------------------------------------------------- formats

def test_ripc_round_trip(tmp_path, rng):
    pts = rng.normal(size=(10, 3)).astype(np.float32).astype(np.float64)
    write_ripc(tmp_path / "a.ripc", pts)
    raw = (tmp_path / "a.ripc").read_bytes()
    assert raw[:4] == b"RIPC" and int.from_bytes(raw[4:8], "little") == 10 and len(raw) == 8 + 120
    np.testing.assert_array_equal(read_ripc(tmp_path / "a.ripc"), pts)


def test_ripc_bad_magic(tmp_path):
    (tmp_path / "b.ripc").write_bytes(b"XXXX\x00\x00\x00\x00")
    with pytest.raises(ValueError):
        read_ripc(tmp_path / "b.ripc")


def test_xyz_round_trip(tmp_path, rng):
    pts = rng.normal(size=(7, 3))
    write_xyz(tmp_path / "a.xyz", pts)
    np.testing.assert_array_equal(read_xyz(tmp_path / "a.xyz"), pts)


def test_labels_round_trip(tmp_path):
    write_labels(tmp_path / "labels.csv", [("a.ripc", 1), ("b.ripc", 0)])
    assert (tmp_path / "labels.csv").read_text().splitlines()[0] == "filename,label"
    assert read_labels(tmp_path / "labels.csv") == [("a.ripc", 1), ("b.ripc", 0)]


def test_checkpoint_round_trip_and_bytes(tmp_path, rng):
    arrays = {"student.w": rng.normal(size=(3, 2)), "opt.m.w": np.zeros(4)}
    save_checkpoint(tmp_path / "a.zip", arrays, {"step": 3})
    save_checkpoint(tmp_path / "b.zip", arrays, {"step": 3})
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()
    back, meta = load_checkpoint(tmp_path / "a.zip")
    assert meta["step"] == 3
    np.testing.assert_array_equal(back["student.w"], arrays["student.w"])


# -------------------------------------------------------------------- config

def test_config_round_trip(tmp_path):
    cfg = desk_config(mae={"alpha": 0.5}, scenario="zz", seed=3)
    dump_config(cfg, tmp_path / "c.json")
    again = load_config(tmp_path / "c.json")
    assert again == cfg
    assert load_config(tmp_path / "c.json") == again


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"model": {"dimm": 3}},
    {"model": {"dim": "96"}},
    {"model": {"dim": 10, "heads": 3}},
    {"mae": {"alpha": 1.5}},
    {"scenario": "xy"},
    {"seed": 1.5},
    {"ablation": {"dual_branch_vs_ae": "vae"}},
])
def test_config_rejects(raw):
    with pytest.raises(ValueError):
        config_from_dict(raw)


def test_full_config_sizes():
    m = full_config().model
    assert (m.dim, m.depth, m.heads, m.g, m.k) == (384, 12, 6, 64, 32)
    assert Config().optim.base_lr == 5e-4


# ---------------------------------------------------------------- validation

def test_validation_helpers():
    with pytest.raises(DimensionError):
        check_point_cloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        check_point_cloud(np.array([[np.inf, 0, 0]]))
    with pytest.raises(ValueError):
        check_point_clouds([])
    assert len(check_point_clouds(np.zeros((2, 5, 3)))) == 2


# ----------------------------------------------------------------------- cli

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--count", "24", "--families", "helix,asymmetric-L,skewed-ellipsoid",
                 "--points", "64", "--seed", "1", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_gen_data_counts(tmp_path):
    assert main(["gen-data", "--count", "200", "--points", "32", "--out", str(tmp_path)]) == 0
    files = [p for p in tmp_path.iterdir() if p.suffix == ".ripc"]
    assert len(files) == 200
    rows = read_labels(tmp_path / "labels.csv")
    assert len(rows) == 200 and {l for _, l in rows} == {0, 1, 2, 3}


def test_gen_data_deterministic(tmp_path, monkeypatch):
    monkeypatch.setenv("RIMAE_THREADS", "3")
    for sub in ("a", "b"):
        assert main(["gen-data", "--count", "12", "--seed", "4", "--format", "xyz",
                     "--out", str(tmp_path / sub)]) == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_pretrain_deterministic(tmp_path, dataset, config_file):
    for sub in ("a", "b"):
        assert main(["pretrain", "--config", str(config_file), "--data", str(dataset),
                     "--seed", "2", "--out", str(tmp_path / sub)]) == 0
    for name in ("loss.csv", "checkpoint.zip", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with open(tmp_path / "a" / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and list(rows[0]) == ["step", "loss", "teacher_variance", "lr", "m"]


def test_pretrain_resume_matches_straight_run(tmp_path, dataset, config_file):
    straight = tmp_path / "straight"
    assert main(["pretrain", "--config", str(config_file), "--data", str(dataset), "--out", str(straight)]) == 0
    assert main(["pretrain", "--config", str(config_file), "--data", str(dataset), "--until-step", "2",
                 "--out", str(tmp_path / "half")]) == 0
    resumed = tmp_path / "resumed"
    assert main(["pretrain", "--config", str(config_file), "--data", str(dataset), "--out", str(resumed),
                 "--resume", str(tmp_path / "half" / "checkpoint.zip")]) == 0
    assert (resumed / "checkpoint.zip").read_bytes() == (straight / "checkpoint.zip").read_bytes()
    tail = (straight / "loss.csv").read_text().splitlines()[-2:]
    assert (resumed / "loss.csv").read_text().splitlines()[1:] == tail


def test_eval_invariance_cli(tmp_path, dataset, config_file, capsys):
    run = tmp_path / "run"
    main(["pretrain", "--config", str(config_file), "--data", str(dataset), "--out", str(run)])
    code = main(["eval-invariance", "--checkpoint", str(run / "checkpoint.zip"), "--data", str(dataset),
                 "--trials", "3", "--out", str(run)])
    assert code == 0
    report = json.loads((run / "invariance.json").read_text())
    assert report["ok"] and max(report["residuals"].values()) < 1e-8
    assert "PASS encoder" in capsys.readouterr().out


def test_eval_invariance_baseline_fails(tmp_path, dataset, config_file):
    cfg = json.loads(config_file.read_text())
    cfg["ablation"] = {"baseline": True}
    path = tmp_path / "base.json"
    path.write_text(json.dumps(cfg))
    main(["pretrain", "--config", str(path), "--data", str(dataset), "--out", str(tmp_path)])
    code = main(["eval-invariance", "--checkpoint", str(tmp_path / "checkpoint.zip"), "--data", str(dataset),
                 "--trials", "2", "--out", str(tmp_path)])
    assert code == 1
    report = json.loads((tmp_path / "invariance.json").read_text())
    assert report["residuals"]["encoder"] > 1e-2


def test_eval_invariance_zero_trials(tmp_path, dataset):
    with pytest.raises(SystemExit) as err:
        main(["eval-invariance", "--checkpoint", "x.zip", "--data", str(dataset), "--trials", "0"])
    assert err.value.code == 2


def test_probe_and_finetune_cli(tmp_path, dataset, config_file, capsys):
    main(["pretrain", "--config", str(config_file), "--data", str(dataset), "--out", str(tmp_path)])
    ck = str(tmp_path / "checkpoint.zip")
    assert main(["probe", "--checkpoint", ck, "--data", str(dataset), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "probe.json").read_text())
    assert set(report) == {"zz", "zso3", "so3so3"}
    assert report["zz"]["accuracy"] == report["zso3"]["accuracy"]
    assert main(["finetune", "--checkpoint", ck, "--data", str(dataset), "--steps", "2",
                 "--scenario", "zso3", "--out", str(tmp_path)]) == 0
    assert 0.0 <= json.loads((tmp_path / "finetune.json").read_text())["accuracy"] <= 1.0


def test_ablate_cli_rows(tmp_path, dataset, config_file):
    assert main(["ablate", "--config", str(config_file), "--data", str(dataset), "--out", str(tmp_path)]) == 0
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["row"], r["ri_oe"], r["ri_pe"], r["objective"]) for r in rows] == [
        ("#1", "False", "False", "dual_branch"),
        ("#2", "True", "False", "dual_branch"),
        ("#3", "False", "True", "dual_branch"),
        ("#4", "True", "True", "ae"),
        ("#5", "True", "True", "dual_branch"),
    ]


def test_rotate_cli(tmp_path, dataset):
    src = sorted(p for p in dataset.iterdir() if p.suffix == ".ripc")[0]
    R = np.array([[0.0, 1, 0], [-1, 0, 0], [0, 0, 1]])
    assert main(["rotate", str(src), "--rotation", " ".join(map(str, R.ravel())), "--out", str(tmp_path)]) == 0
    np.testing.assert_allclose(read_ripc(tmp_path / src.name), read_ripc(src) @ R, atol=1e-6)
    assert main(["rotate", str(src), "--rotation", "1 0 0 0 1 0 0 0 -1", "--out", str(tmp_path)]) == 2


def test_missing_data_dir(tmp_path, config_file):
    assert main(["pretrain", "--config", str(config_file), "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path)]) == 2


def test_load_dataset(dataset):
    clouds, labels = load_dataset(dataset)
    assert len(clouds) == 24 and labels.tolist()[:3] == [0, 1, 2]
