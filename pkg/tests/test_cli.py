"""Command-line tests: exit codes, artifact plumbing, audit verdicts, SVG output.

Commands run in-process through main(argv) so stdout/stderr and exit codes are
checked directly; one subprocess smoke covers the module entry point.
"""

import math
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from rform.cli import main
from rform.envs import read_dataset
from rform.trainer import METRICS_HEADER, TrainConfig, sample_header

BOUND = math.sqrt(2.0)  # default reform latent bound in two dimensions


def run_cli(*argv):
    return main([str(a) for a in argv])


def write_config(path, **kw):
    base = dict(
        env="two-corner-bandit",
        variant="reform",
        batch_size=16,
        hidden_widths=(8, 8),
        flow_steps=4,
        total_steps=30,
        eval_interval=15,
        eval_episodes=6,
        log_interval=15,
        seed=5,
    )
    base.update(kw)
    path.write_text(TrainConfig(**base).to_text())
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared dataset, config, and one finished training run."""
    root = tmp_path_factory.mktemp("cli")
    assert run_cli("gen-data", "--env", "two-corner-bandit", "--episodes", 200,
                   "--seed", 1, "--out", root / "d.rfds") == 0
    write_config(root / "cfg.txt")
    assert run_cli("train", "--config", root / "cfg.txt", "--data", root / "d.rfds",
                   "--out", root / "run") == 0
    return root


def fake_run(d, norms, clip_rate=0.0):
    """Handcrafted run directory with chosen latent norms in the dump."""
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.txt").write_text(TrainConfig(total_steps=0).to_text())
    rows = [sample_header(2)]
    for nm in norms:
        vals = [0.0, 0.0, nm, 0.0, 0.5, 0.5, nm]  # latent on the x axis
        rows.append(",".join(repr(float(v)) for v in vals))
    (d / "samples.csv").write_text("\n".join(rows) + "\n")
    (d / "metrics.csv").write_text(
        METRICS_HEADER + "\n" + f"1,0.1,0.1,0.1,0.1,0.0,{clip_rate!r}\n"
    )
    return d


# ---------------------------------------------------------------------------
# gen-data


class TestGenData:
    def test_writes_dataset_and_reports_dims(self, tmp_path, capsys):
        out = tmp_path / "d.rfds"
        assert run_cli("gen-data", "--env", "two-corner-bandit", "--episodes", 50,
                       "--seed", 3, "--out", out) == 0
        assert "wrote 50 transitions (state dim 2, action dim 2)" in capsys.readouterr().out
        assert len(read_dataset(out)) == 50

    def test_repeat_invocations_byte_identical(self, tmp_path):
        paths = [tmp_path / "a.rfds", tmp_path / "b.rfds"]
        for p in paths:
            run_cli("gen-data", "--env", "line-world", "--episodes", 20,
                    "--seed", 9, "--out", p)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_zero_episodes_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run_cli("gen-data", "--env", "line-world", "--episodes", 0,
                    "--seed", 1, "--out", tmp_path / "d.rfds")
        assert exc.value.code == 2

    def test_unknown_env(self, tmp_path, capsys):
        assert run_cli("gen-data", "--env", "pong", "--episodes", 5,
                       "--seed", 1, "--out", tmp_path / "d.rfds") == 2
        assert "ContractError" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train and sweep


class TestTrain:
    def test_artifacts_written_with_finite_losses(self, workdir):
        run = workdir / "run"
        for name in ("config.txt", "metrics.csv", "samples.csv", "checkpoint.rfck"):
            assert (run / name).is_file()
        lines = (run / "metrics.csv").read_text().splitlines()
        assert lines[0] == METRICS_HEADER
        assert len(lines) >= 2
        for line in lines[1:]:
            assert all(math.isfinite(float(v)) for v in line.split(","))

    def test_rerun_byte_identical(self, workdir, tmp_path):
        run_cli("train", "--config", workdir / "cfg.txt", "--data", workdir / "d.rfds",
                "--out", tmp_path / "again")
        for name in ("config.txt", "metrics.csv", "samples.csv", "checkpoint.rfck"):
            assert (tmp_path / "again" / name).read_bytes() == \
                (workdir / "run" / name).read_bytes()

    def test_seed_flag_overrides_config(self, workdir, tmp_path, capsys):
        assert run_cli("train", "--config", workdir / "cfg.txt",
                       "--data", workdir / "d.rfds",
                       "--out", tmp_path / "r", "--seed", 77) == 0
        cfg = TrainConfig.from_text((tmp_path / "r" / "config.txt").read_text())
        assert cfg.seed == 77

    def test_unknown_variant_lists_tags(self, workdir, tmp_path, capsys):
        assert run_cli("train", "--config", workdir / "cfg.txt",
                       "--data", workdir / "d.rfds",
                       "--out", tmp_path / "r", "--variant", "nope") == 2
        err = capsys.readouterr().err
        assert "ConfigError" in err
        assert "reform" in err and "fql-alpha" in err

    def test_missing_config_key_named(self, workdir, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("env=two-corner-bandit\nvariant=reform\nseed=1\n")
        assert run_cli("train", "--config", bad, "--data", workdir / "d.rfds",
                       "--out", tmp_path / "r") == 2
        assert "total_steps" in capsys.readouterr().err

    def test_dataset_env_mismatch(self, workdir, tmp_path, capsys):
        cfg = write_config(tmp_path / "lw.txt", env="line-world", total_steps=1)
        assert run_cli("train", "--config", cfg, "--data", workdir / "d.rfds",
                       "--out", tmp_path / "r") == 2
        assert "state dim" in capsys.readouterr().err


class TestSweep:
    def test_one_run_per_value(self, workdir, tmp_path, capsys):
        assert run_cli("sweep", "--config", workdir / "cfg.txt",
                       "--data", workdir / "d.rfds", "--out", tmp_path / "sw",
                       "--param", "radius_scale", "--values", "0.5,1.0") == 0
        for raw, want in (("0.5", 0.5), ("1.0", 1.0)):
            sub = tmp_path / "sw" / f"radius_scale={raw}"
            cfg = TrainConfig.from_text((sub / "config.txt").read_text())
            assert cfg.radius_scale == want
            assert (sub / "checkpoint.rfck").is_file()
        out = capsys.readouterr().out
        assert "radius_scale=0.5" in out and "radius_scale=1.0" in out

    def test_unknown_param(self, workdir, tmp_path, capsys):
        assert run_cli("sweep", "--config", workdir / "cfg.txt",
                       "--data", workdir / "d.rfds", "--out", tmp_path / "sw",
                       "--param", "speed", "--values", "1,2") == 2
        assert "unknown config key" in capsys.readouterr().err

    def test_tuple_key_not_sweepable(self, workdir, tmp_path, capsys):
        assert run_cli("sweep", "--config", workdir / "cfg.txt",
                       "--data", workdir / "d.rfds", "--out", tmp_path / "sw",
                       "--param", "hidden_widths", "--values", "8") == 2
        assert "cannot sweep" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval


class TestEval:
    def test_deterministic_given_seed(self, workdir, capsys):
        outs = []
        for _ in range(2):
            assert run_cli("eval", "--run", workdir / "run",
                           "--episodes", 8, "--seed", 3) == 0
            outs.append(capsys.readouterr().out)
        assert outs[0] == outs[1]
        assert "eval return" in outs[0]

    def test_missing_run_dir(self, tmp_path, capsys):
        assert run_cli("eval", "--run", tmp_path / "nope") == 2


# ---------------------------------------------------------------------------
# audit


class TestAudit:
    def test_real_run_passes(self, workdir, capsys):
        assert run_cli("audit", "--run", workdir / "run") == 0
        out = capsys.readouterr().out
        assert "audit: PASS" in out
        assert "max latent norm" in out
        assert "clip rate" in out

    def test_norms_at_bound_pass(self, tmp_path, capsys):
        fake_run(tmp_path / "r", [0.3, BOUND])
        assert run_cli("audit", "--run", tmp_path / "r") == 0

    def test_escaped_norm_fails_with_row(self, tmp_path, capsys):
        fake_run(tmp_path / "r", [0.3, 1.01 * BOUND, 0.5])
        assert run_cli("audit", "--run", tmp_path / "r") == 1
        out = capsys.readouterr().out
        assert "audit: FAIL" in out
        assert "sample row 2" in out

    def test_clip_rate_violation_fails(self, tmp_path, capsys):
        fake_run(tmp_path / "r", [0.3], clip_rate=0.5)
        assert run_cli("audit", "--run", tmp_path / "r") == 1
        assert "clip rate" in capsys.readouterr().out

    def test_missing_dump_is_error(self, tmp_path, capsys):
        d = fake_run(tmp_path / "r", [0.3])
        (d / "samples.csv").unlink()
        assert run_cli("audit", "--run", d) == 2
        assert "samples.csv" in capsys.readouterr().err

    def test_empty_dump_is_error(self, tmp_path, capsys):
        d = fake_run(tmp_path / "r", [])
        assert run_cli("audit", "--run", d) == 2
        assert "empty" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# viz


class TestViz:
    def test_three_point_fixture(self, tmp_path, capsys):
        d = fake_run(tmp_path / "r", [0.3, 0.5, 0.7])
        out = tmp_path / "plot.svg"
        assert run_cli("viz", "--run", d, "--out", out) == 0
        root = ET.fromstring(out.read_text())  # must be valid XML
        ns = "{http://www.w3.org/2000/svg}"
        circles = root.findall(f"{ns}circle")
        by_class = {}
        for c in circles:
            by_class.setdefault(c.get("class"), []).append(c)
        assert len(by_class["latent"]) == 3
        assert len(by_class["action"]) == 3
        assert len(by_class["boundary"]) == 1
        assert len(root.findall(f"{ns}rect")) == 1
        # boundary radius in plot coordinates: l / (2.2 max(l, 1)) of the view
        want = 480.0 * BOUND / (2.2 * BOUND)
        assert float(by_class["boundary"][0].get("r")) == pytest.approx(want, abs=1e-3)

    def test_csv_copy_and_byte_stability(self, tmp_path):
        d = fake_run(tmp_path / "r", [0.3, 0.5])
        svgs, csvs = [], []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.svg"
            run_cli("viz", "--run", d, "--out", out)
            svgs.append(out.read_bytes())
            csvs.append(out.with_suffix(".csv").read_bytes())
        assert svgs[0] == svgs[1]
        assert csvs[0] == csvs[1]
        assert csvs[0] == (d / "samples.csv").read_bytes()

    def test_read_only_on_run_dir(self, tmp_path):
        d = fake_run(tmp_path / "r", [0.3])
        before = {p.name: p.read_bytes() for p in d.iterdir()}
        run_cli("viz", "--run", d, "--out", tmp_path / "plot.svg")
        after = {p.name: p.read_bytes() for p in d.iterdir()}
        assert before == after

    def test_empty_dump_is_error(self, tmp_path, capsys):
        d = fake_run(tmp_path / "r", [])
        assert run_cli("viz", "--run", d, "--out", tmp_path / "p.svg") == 2
        assert "empty" in capsys.readouterr().err

    def test_real_run_plot(self, workdir, tmp_path):
        out = tmp_path / "run.svg"
        assert run_cli("viz", "--run", workdir / "run", "--out", out) == 0
        ET.fromstring(out.read_text())


# ---------------------------------------------------------------------------
# logging and entry point


class TestEntryPoint:
    def test_bad_log_level_rejected(self, workdir, monkeypatch, capsys):
        monkeypatch.setenv("RFORM_LOG_LEVEL", "loud")
        assert run_cli("audit", "--run", workdir / "run") == 2
        assert "RFORM_LOG_LEVEL" in capsys.readouterr().err

    def test_debug_level_accepted(self, tmp_path, monkeypatch):
        monkeypatch.setenv("RFORM_LOG_LEVEL", "debug")
        assert run_cli("gen-data", "--env", "line-world", "--episodes", 2,
                       "--seed", 0, "--out", tmp_path / "d.rfds") == 0

    def test_module_invocation(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "rform.cli", "--help"],
            capture_output=True, text=True, timeout=120,
        )
        assert proc.returncode == 0
        assert "gen-data" in proc.stdout
