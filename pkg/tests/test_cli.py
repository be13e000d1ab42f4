import json

import numpy as np
import pytest

from driftlab import artifacts, cli
from driftlab.errors import ConfigError


@pytest.fixture(autouse=True)
def no_seed_env(monkeypatch):
    monkeypatch.delenv(cli.SEED_ENV, raising=False)


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def manifest(out_dir):
    return json.loads((out_dir / "manifest.json").read_text())


# Seeds.

def test_seed_precedence(monkeypatch):
    assert cli.resolve_seed() == 0
    assert cli.resolve_seed(configured=5) == 5
    monkeypatch.setenv(cli.SEED_ENV, "9")
    assert cli.resolve_seed(configured=5) == 9
    assert cli.resolve_seed(explicit=3, configured=5) == 3


def test_seed_must_fit_u64(monkeypatch):
    assert cli.resolve_seed(2**64 - 1) == 2**64 - 1
    with pytest.raises(ConfigError):
        cli.resolve_seed(2**64)
    with pytest.raises(ConfigError):
        cli.resolve_seed(-1)
    monkeypatch.setenv(cli.SEED_ENV, "abc")
    with pytest.raises(ConfigError):
        cli.resolve_seed()


# Config runner.

def test_missing_schedule_exits_two_with_manifest(tmp_path):
    cfg = write_config(tmp_path / "bad.json", {"verify": {"checks": ["ddim-ode"]}})
    out = tmp_path / "out"
    assert cli.main(["run", cfg, "--out-dir", str(out)]) == 2
    m = manifest(out)
    assert m["status"] == "error" and "schedule" in m["message"]


def test_syntax_error_reports_location(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "schedule": {"kind": "vp-constant",}\n}')
    assert cli.main(["run", str(path), "--out-dir", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "broken.json:2:" in err
    assert (tmp_path / "o" / "manifest.json").exists()


def test_unknown_block_is_rejected(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"schedule": {"kind": "vp-constant"}, "extra": {}})
    assert cli.main(["run", cfg, "--out-dir", str(tmp_path)]) == 2


def test_verify_config_passes(tmp_path):
    cfg = write_config(tmp_path / "v.json", {
        "schedule": {"kind": "vp-constant", "beta": 2.0},
        "verify": {"checks": ["ddim-ode", "ddpm-expansion", "reverse-pde"]}})
    out = tmp_path / "out"
    assert cli.main(["run", cfg, "--out-dir", str(out)]) == 0
    header, rows = artifacts.read_csv(out / "verify.csv")
    assert header == ["check", "statistic", "threshold", "pass"]
    assert rows and all(r[3] == "true" for r in rows)
    m = manifest(out)
    assert m["status"] == "ok" and m["failing_checks"] == []
    assert set(m["versions"]) == {"driftlab", "numpy", "scipy", "python"}


def test_failing_check_exits_one_and_lists_it(tmp_path, capsys):
    # A nearly frozen schedule keeps the marginal too narrow for the fixed grid.
    cfg = write_config(tmp_path / "f.json", {
        "schedule": {"kind": "vp-constant", "beta": 0.01},
        "verify": {"checks": ["continuity"]}})
    out = tmp_path / "out"
    assert cli.main(["run", cfg, "--out-dir", str(out)]) == 1
    m = manifest(out)
    assert m["status"] == "failed" and m["failing_checks"]
    assert "failing checks" in capsys.readouterr().err


def test_env_seed_overrides_config(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "77")
    cfg = write_config(tmp_path / "s.json", {
        "seed": 1, "schedule": {"kind": "vp-constant"},
        "sampler": {"name": "euler", "steps": 5, "batch": 4}})
    assert cli.main(["run", cfg, "--out-dir", str(tmp_path / "o")]) == 0
    assert manifest(tmp_path / "o")["seed"] == 77


# Sampling artifacts.

@pytest.mark.parametrize("sampler", cli.SAMPLER_NAMES)
def test_sample_runs_are_byte_identical(tmp_path, sampler):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = cli.main(["sample", "--sampler", sampler, "--steps", "12", "--batch", "16",
                       "--eta", "0.5", "--seed", "4", "--histogram", "--out-dir", str(out)])
        assert rc == 0
        outs.append(out)
    for fname in ("trajectory.csv", "terminal.svg"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


def test_trajectory_csv_layout(tmp_path):
    out = tmp_path / "o"
    cli.main(["sample", "--steps", "4", "--batch", "3", "--out-dir", str(out)])
    header, rows = artifacts.read_csv(out / "trajectory.csv")
    assert header == ["lane", "step", "t", "dim0"]
    assert len(rows) == 3 * 5
    assert float(rows[0][2]) > float(rows[4][2])


def test_different_seeds_differ(tmp_path):
    for s in ("1", "2"):
        cli.main(["sample", "--sampler", "em", "--steps", "5", "--batch", "4", "--seed", s,
                  "--out-dir", str(tmp_path / s)])
    assert (tmp_path / "1" / "trajectory.csv").read_bytes() != \
        (tmp_path / "2" / "trajectory.csv").read_bytes()


def test_bad_sampler_config_exits_two(tmp_path):
    rc = cli.main(["sample", "--steps", "0", "--out-dir", str(tmp_path)])
    assert rc == 2
    assert manifest(tmp_path)["status"] == "error"


# Training and model files.

def test_train_then_sample_with_model(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["train", "--steps", "50", "--batch", "32", "--out-dir", str(out)]) == 0
    header, rows = artifacts.read_csv(out / "losses.csv")
    assert len(rows) > 0
    mlp, meta = artifacts.load_model(out / "model.bin")
    assert meta["loss"] == "denoise"
    rc = cli.main(["sample", "--sampler", "ddim", "--steps", "10", "--batch", "8",
                   "--model", str(out / "model.bin"), "--out-dir", str(out)])
    assert rc == 0


# Diffusion LM.

def test_dlm_round_trip(tmp_path, capsys):
    out = tmp_path / "o"
    rc = cli.main(["dlm-train", "--vocab-size", "8", "--dim", "4", "--length", "3",
                   "--steps", "30", "--out-dir", str(out)])
    assert rc == 0
    capsys.readouterr()
    args = ["dlm-infer", "--model", str(out / "dlm.bin"), "--prompt", "abc", "--steps", "6",
            "--trace", "trace.csv", "--out-dir", str(out)]
    assert cli.main(args) == 0
    first = capsys.readouterr().out.strip()
    assert len(first) == 3 and set(first) <= set("abcdefgh")
    assert cli.main(args) == 0
    assert capsys.readouterr().out.strip() == first
    header, rows = artifacts.read_csv(out / "trace.csv")
    assert header[:3] == ["step", "t", "position"] and len(rows) == 5 * 3


def test_dlm_infer_rejects_wrong_prompt_length(tmp_path):
    out = tmp_path / "o"
    cli.main(["dlm-train", "--vocab-size", "8", "--dim", "4", "--length", "3",
              "--steps", "5", "--out-dir", str(out)])
    assert cli.main(["dlm-infer", "--model", str(out / "dlm.bin"), "--prompt", "ab",
                     "--out-dir", str(out)]) == 2


def test_dlm_infer_rejects_non_dlm_model(tmp_path):
    out = tmp_path / "o"
    cli.main(["train", "--steps", "5", "--batch", "8", "--out-dir", str(out)])
    assert cli.main(["dlm-infer", "--model", str(out / "model.bin"), "--prompt", "abc",
                     "--out-dir", str(out)]) == 2


def test_histogram_counts_cover_samples():
    samples = np.random.default_rng(0).standard_normal(1000)
    counts, edges = artifacts.histogram_counts(samples, 20)
    assert counts.sum() == 1000 and edges.size == 21
