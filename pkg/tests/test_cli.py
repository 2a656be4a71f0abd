import json

import numpy as np
import pytest

from scaledet import cli
from scaledet.experiments import RunConfig, axis_values, format_table

SMOKE = ["--set", "train_size=12", "--set", "val_size=4", "--set", "epochs=1",
         "--set", "channels=16", "--set", "heads=2", "--set", "encoder_blocks=1",
         "--set", "queries=10", "--set", "batch_size=6"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert cli.main(["-q", "train", "--out", str(out), *SMOKE]) == 0
    return out


# ---------------------------------------------------------------- RunConfig

def test_run_config_round_trip(tmp_path):
    cfg = RunConfig(scales=(3, 5, 7), lambda_wsm=0.5, wsm_mode="constant", object_count=(0, 3))
    assert RunConfig.from_text(cfg.to_text()) == cfg
    cfg.save(tmp_path / "c.txt")
    assert RunConfig.load(tmp_path / "c.txt") == cfg
    assert RunConfig.from_text("# comment\nseed=3\n\n")["seed"] == 3
    assert RunConfig()["weight_decay"] == 1e-4 and RunConfig()["batch_size"] == 16
    assert RunConfig()["learning_rate"] == 2e-4


@pytest.mark.parametrize("text", ["bogus=1", "epochs=two", "noline", "depth_range=0,10",
                                  "wsm_mode=median", "aux_loss=maybe"])
def test_run_config_rejects_bad_input(text):
    with pytest.raises(ValueError):
        RunConfig.from_text(text)


def test_axis_values():
    assert axis_values("scale-set", "3,5,7;1,3,5,7,9") == [(3, 5, 7), (1, 3, 5, 7, 9)]
    assert axis_values("lambda8", "0,0.1,0.2,0.3,0.4,0.5") == [0, 0.1, 0.2, 0.3, 0.4, 0.5]
    assert axis_values("wsm-mode", "constant,log-loss,rank") == ["constant", "log-loss", "rank"]
    with pytest.raises(ValueError):
        axis_values("scale-set", "2,4")
    with pytest.raises(ValueError):
        axis_values("depth", "1")


# -------------------------------------------------------------------- train

def test_train_writes_self_contained_run(trained):
    assert {p.name for p in trained.iterdir()} >= {"config.txt", "log.jsonl", "checkpoint.pt",
                                                    "metrics.json"}
    rows = [json.loads(line) for line in (trained / "log.jsonl").read_text().splitlines()]
    terms = {r["term"] for r in rows}
    assert {"L_class", "L_2dsize", "L_xy3d", "L_giou", "L_3dsize", "L_angle", "L_depth",
            "L_WSM"} <= terms
    assert RunConfig.load(trained / "config.txt")["train_size"] == 12


def test_train_is_reproducible(trained, tmp_path):
    assert cli.main(["-q", "train", "--no-eval", "--out", str(tmp_path / "again"),
                     "--config", str(trained / "config.txt")]) == 0
    last = lambda d: json.loads((d / "log.jsonl").read_text().splitlines()[-1])["value"]  # noqa: E731
    assert last(tmp_path / "again") == pytest.approx(last(trained), abs=1e-6)


def test_lambda_zero_still_logs_wsm(tmp_path):
    assert cli.main(["-q", "train", "--no-eval", "--out", str(tmp_path), *SMOKE,
                     "--set", "lambda_wsm=0"]) == 0
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    wsm = [r for r in rows if r["term"] == "L_WSM"]
    assert wsm and wsm[0]["value"] >= 0


def test_non_finite_loss_aborts_naming_term(tmp_path, monkeypatch, capsys):
    import torch
    from scaledet import estimator

    monkeypatch.setattr(estimator, "dense_depth_loss", lambda *a: torch.tensor(float("nan")))
    assert cli.main(["-q", "train", "--out", str(tmp_path), *SMOKE]) == 1
    assert "L_depth" in capsys.readouterr().err


def test_unknown_key_is_an_error(tmp_path, capsys):
    assert cli.main(["-q", "train", "--out", str(tmp_path), "--set", "nope=1"]) == 2
    assert "nope" in capsys.readouterr().err


# --------------------------------------------------------------------- eval

def test_eval_schema_and_determinism(trained, tmp_path):
    ck = str(trained / "checkpoint.pt")
    assert cli.main(["-q", "eval", "--checkpoint", ck, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["-q", "eval", "--checkpoint", ck, "--out", str(tmp_path / "b")]) == 0
    a = json.loads((tmp_path / "a" / "metrics.json").read_text())
    b = json.loads((tmp_path / "b" / "metrics.json").read_text())
    assert a == b
    heads = ["position_precision", "weighted_position_precision", "mean_scale_error", "ap40"]
    expected = set(heads) | {f"{h}_block{i}" for h in heads for i in range(3)}
    assert set(a) == expected
    assert a["ap40"] < 0.05
    diag = json.loads((tmp_path / "a" / "diagnostics.json").read_text())
    assert set(diag) == {"chance_position_precision", "scale_out_of_range_fraction"}
    assert 0 <= diag["scale_out_of_range_fraction"] <= 1


def test_eval_rejects_mismatched_config(trained, tmp_path, capsys):
    other = RunConfig.load(trained / "config.txt").replace(channels=32)
    other.save(tmp_path / "other.txt")
    code = cli.main(["-q", "eval", "--checkpoint", str(trained / "checkpoint.pt"),
                     "--config", str(tmp_path / "other.txt"), "--out", str(tmp_path)])
    assert code == 2 and "does not match" in capsys.readouterr().err


def test_eval_on_disk_dataset(trained, tmp_path):
    assert cli.main(["-q", "make-data", "--out", str(tmp_path / "data"), "--set", "train_size=2",
                     "--set", "val_size=3"]) == 0
    assert cli.main(["-q", "eval", "--checkpoint", str(trained / "checkpoint.pt"),
                     "--data", str(tmp_path / "data"), "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "metrics.json").exists()


# ------------------------------------------------------------------ inspect

def test_inspect_counts_and_determinism(trained, tmp_path):
    args = ["-q", "inspect", "--checkpoint", str(trained / "checkpoint.pt"), "--sample", "000001"]
    assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "000001_overlay.png").read_bytes()
    assert a == (tmp_path / "b" / "000001_overlay.png").read_bytes()
    info = json.loads((tmp_path / "a" / "000001_keypoints.json").read_text())
    assert info["keypoints_per_block"] == [10 * 2 * 4] * 3


def test_inspect_missing_sample(trained, tmp_path, capsys):
    code = cli.main(["-q", "inspect", "--checkpoint", str(trained / "checkpoint.pt"),
                     "--sample", "999999", "--out", str(tmp_path)])
    assert code == 2 and "999999" in capsys.readouterr().err


def test_render_overlay_zero_offsets_coincide():
    import torch
    from scaledet.data import SceneConfig, generate_scene
    from scaledet.estimator import ScaleAwareMonoDetector
    from scaledet.model import ModelConfig, MonoDetector

    cfg = ModelConfig(channels=16, heads=8, queries=50, encoder_blocks=1)
    est = ScaleAwareMonoDetector(channels=16, heads=8, encoder_blocks=1)
    est.model_ = MonoDetector(cfg).eval()
    est.model_.zero_heads()
    sample = generate_scene(SceneConfig(), seed=0)
    with torch.no_grad():
        pred = est.model_(torch.as_tensor(sample.image)[None, None], 700.0)
    _, records = cli.render_overlay(sample, pred, est)
    assert [len(r) for r in records] == [50 * 8 * 4] * 3
    pos = pred.final["positions"][0].numpy() * [640, 192]
    for q, _, _, x, y, _ in records[-1]:
        assert np.allclose((x, y), pos[q], atol=1e-3)


# ------------------------------------------------------------------- ablate

def test_ablate_lambda_table(tmp_path, capsys):
    assert cli.main(["-q", "ablate", "--out", str(tmp_path), *SMOKE, "--set", "train_size=6",
                     "--axis", "lambda8", "--values", "0,0.2"]) == 0
    rows = json.loads((tmp_path / "ablation.json").read_text())
    assert [r["value"] for r in rows] == ["0.0", "0.2"]
    assert all((tmp_path / f"lambda8={v}" / "seed0" / "metrics.json").exists() for v in ("0.0", "0.2"))
    table = (tmp_path / "ablation.txt").read_text()
    assert table.splitlines()[0].startswith("lambda8") and len(table.splitlines()) == 3
    assert "position_precision" in capsys.readouterr().out


def test_format_table_handles_missing():
    rows = [{"axis": "wsm-mode", "value": "rank", "position_precision": None,
             "weighted_position_precision": 0.5, "mean_scale_error": 1.0, "ap40": 0.1,
             "chance_position_precision": 0.05}]
    assert "-" in format_table(rows).splitlines()[1]
