import json

import numpy as np
import pytest

from timely_jscc import cli
from timely_jscc.cli_io import (TRACE_COLUMNS, ConfigError, MalformedHeaderError, TruncatedPayloadError,
                                UnsupportedDepthError, export_sweep, export_trace, load_config, load_image,
                                load_image_dir, parse_pnm, read_trace, save_image)
from timely_jscc.engine import SimConfig, run_episode
from timely_jscc.policy import FixedPolicy, PpoConfig


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    gray = rng.integers(0, 256, size=(4, 3), dtype=np.uint8)
    save_image(tmp_path / "a.ppm", rgb)
    save_image(tmp_path / "b.pgm", gray)
    np.testing.assert_array_equal(load_image(tmp_path / "a.ppm").pixels, rgb)
    np.testing.assert_array_equal(load_image(tmp_path / "b.pgm").pixels[..., 0], gray)
    items = load_image_dir(tmp_path)
    assert [name for _, name in items] == ["a.ppm", "b.pgm"]


def test_pnm_header_comments():
    img = parse_pnm(b"P5\n# made by hand\n2 1\n# depth\n255\n\x01\x02")
    assert img.pixels[:, :, 0].tolist() == [[1, 2]]


@pytest.mark.parametrize("data, err", [
    (b"P3\n1 1\n255\n1", MalformedHeaderError),
    (b"P5\n2 x\n255\n\x00\x00", MalformedHeaderError),
    (b"P5\n0 1\n255\n", MalformedHeaderError),
    (b"P5\n2 2\n255\n\x00", TruncatedPayloadError),
    (b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00", UnsupportedDepthError),
    (b"P5\n1 1", MalformedHeaderError),
])
def test_pnm_errors(data, err):
    with pytest.raises(err):
        parse_pnm(data)


def test_empty_image_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image_dir(tmp_path)


def _write(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    return p


def test_config_defaults(tmp_path):
    sim, ppo = load_config(_write(tmp_path, ""))
    assert sim == SimConfig() and ppo == PpoConfig()


def test_config_values(tmp_path):
    sim, ppo = load_config(_write(tmp_path, "[sim]\nbaud = 500\nlevels = [0.1, 0.2]\n[ppo]\ngamma = 0.9\n"))
    assert sim.baud == 500.0 and sim.levels == (0.1, 0.2)
    assert ppo.gamma == 0.9


def test_config_unknown_key_reports_line(tmp_path):
    with pytest.raises(ConfigError, match=r":3: \[sim\] bad_key: unknown key"):
        load_config(_write(tmp_path, "[sim]\nbaud = 500\nbad_key = 1\n"))


@pytest.mark.parametrize("text", ["[sim]\nbaud = 'fast'\n", "[ppo]\nepochs = 1.5\n", "[sim]\nbaud = -3\n",
                                  "[extra]\nx = 1\n", "[sim\n"])
def test_config_rejections(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, text))


def test_config_negative_dmin_warns(tmp_path):
    with pytest.warns(UserWarning):
        load_config(_write(tmp_path, "[sim]\nd_min = -2.0\n"))


def test_trace_round_trip(tmp_path):
    cfg = SimConfig()
    trace = run_episode(cfg, FixedPolicy(2, cfg.space), seed=1, decisions=30)
    path = tmp_path / "t.csv"
    export_trace(trace, path)
    assert path.read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)
    rows = read_trace(path)
    assert len(rows) == 30
    for rec, row in zip(trace, rows):
        assert row["decision"] == rec.decision and row["K"] == rec.K
        for col, val in (("t_recv", rec.t_recv), ("voi", rec.voi), ("psnr", rec.psnr), ("lambda", rec.lam)):
            assert row[col] == pytest.approx(val, rel=1e-8)


def test_export_sweep(tmp_path):
    rows = [
        {"d_min": 25.0, "policy": "ppo", "avg_voi": 0.9, "avg_voi_time": 0.5, "avg_psnr": 25.1, "constraint_ok": True},
        {"d_min": 25.0, "policy": "uniform", "avg_voi": 0.7, "avg_voi_time": 0.4, "avg_psnr": 25.5,
         "constraint_ok": True, "fixed": [{"level": 0, "avg_voi": 1.2, "avg_psnr": 21.0}]},
    ]
    paths = export_sweep(rows, tmp_path)
    assert [p.name for p in paths] == ["sweep_dmin_25.csv", "sweep_summary.csv"]
    summary = (tmp_path / "sweep_summary.csv").read_text().splitlines()
    assert summary == ["d_min,avg_voi,avg_psnr,policy", "25,0.9,25.1,ppo", "25,0.7,25.5,uniform"]
    detail = (tmp_path / "sweep_dmin_25.csv").read_text().splitlines()
    assert detail[-1].startswith("fixed0,1.2,nan,21,0")


def test_cli_no_args_and_bad_flag(capsys):
    assert cli.main([]) == 1
    assert cli.main(["simulate", "--policy", "nope"]) == 1
    assert cli.main(["frobnicate"]) == 1


def test_cli_missing_config_is_runtime_error(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.toml"), "--out-dir", str(tmp_path)]) == 2


def test_cli_ppo_without_checkpoint(tmp_path):
    assert cli.main(["simulate", "--policy", "ppo", "--out-dir", str(tmp_path)]) == 1


def test_cli_simulate_and_manifest(tmp_path):
    assert cli.main(["simulate", "--seed", "3", "--decisions", "12", "--out-dir", str(tmp_path)]) == 0
    assert len(read_trace(tmp_path / "trace.csv")) == 12
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 3 and man["command"] == "simulate"
    assert man["outputs"] == ["trace.csv"]
    assert len(man["run_id"]) == 16


def test_cli_train_evaluate_simulate_ppo(tmp_path):
    cfg = _write(tmp_path, "[sim]\nhorizon = 8.0\n[ppo]\nrollout = 128\nminibatch = 32\n")
    out = tmp_path / "o"
    assert cli.main(["train", "--config", str(cfg), "--steps", "256", "--out-dir", str(out)]) == 0
    ckpt = out / "agent.ckpt"
    assert ckpt.exists() and (out / "curves.csv").exists()
    assert cli.main(["evaluate", "--config", str(cfg), "--checkpoint", str(ckpt), "--episodes", "1",
                     "--out-dir", str(out)]) == 0
    lines = (out / "evaluate.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 + 1 + 6
    assert cli.main(["simulate", "--config", str(cfg), "--policy", "ppo", "--checkpoint", str(ckpt),
                     "--out-dir", str(out)]) == 0


def test_cli_rd_profile(tmp_path):
    save_image(tmp_path / "x.ppm", np.random.default_rng(0).integers(0, 256, size=(16, 16, 3)))
    cfg = _write(tmp_path, "[sim]\ncodec = 'dct'\nprofile_trials = 2\n")
    out = tmp_path / "o"
    assert cli.main(["rd-profile", "--config", str(cfg), "--images", str(tmp_path), "--out-dir", str(out)]) == 0
    lines = (out / "rd_profile.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("x.ppm,")
    assert cli.main(["rd-profile", "--count", "3", "--out-dir", str(out)]) == 0


def test_cli_grad_check(tmp_path, capsys):
    assert cli.main(["grad-check", "--nets", "2", "--out-dir", str(tmp_path)]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_every_csv_column_is_documented():
    from pathlib import Path
    from timely_jscc.cli_io import SUMMARY_COLUMNS
    doc = (Path(__file__).parent.parent / "docs" / "formats.md").read_text()
    curves = ["step", "mean_reward", "mean_psnr", "mean_voi", "lam", "policy_loss", "value_loss", "entropy",
              "approx_kl", "clip_frac"]
    evaluate = ["avg_voi", "avg_voi_time", "avg_psnr", "avg_reward", "constraint_ok", "decisions", "histogram"]
    rd = ["psnr_eta_", "psnr_min", "psnr_max", "mu"]
    for col in TRACE_COLUMNS + SUMMARY_COLUMNS + curves + evaluate + rd:
        assert f"`{col}" in doc, col
