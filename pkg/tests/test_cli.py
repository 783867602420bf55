import os

import numpy as np
import pytest

from conftest import TINY_CFG_TEMPLATE
from rainsr.cli import cli
from rainsr.png_io import read_png, write_png


@pytest.fixture(scope="module")
def cli_env(tiny_dataset_root, tmp_path_factory):
    """Config file + a finished tiny run reachable through the CLI."""
    base = tmp_path_factory.mktemp("clienv")
    run_dir = base / "run"
    cfg_path = base / "rainsr.cfg"
    cfg_path.write_text(TINY_CFG_TEMPLATE.format(
        seed=0, run_dir=run_dir, root=tiny_dataset_root,
        t_iters=3, d_iters=2, s_iters=2))
    for stage in ("translator", "dsn", "srn"):
        assert cli(["--config", str(cfg_path), "train", stage]) == 0
    return base, str(cfg_path)


class TestUsageErrors:
    def test_no_command_is_usage_error(self, capsys):
        assert cli([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert cli(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_infer_requires_input(self, capsys):
        assert cli(["infer", "--output", "x.png"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_config_file_is_runtime_error(self, capsys):
        assert cli(["--config", "/nonexistent.cfg", "synth-data"]) == 2
        assert "error" in capsys.readouterr().err


class TestSynthData:
    def test_writes_dataset(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("profile = desk\n[data]\nroot = %s\nsunny = 2\n"
                       "rainy = 2\nreal_lr = 2\neval = 1\nscene_size = 32\n"
                       % (tmp_path / "data"))
        assert cli(["--config", str(cfg), "synth-data"]) == 0
        out = capsys.readouterr().out
        assert "wrote 7 scenes" in out
        assert (tmp_path / "data" / "manifest.txt").exists()
        assert len(list((tmp_path / "data" / "sunny_hr").glob("*.png"))) == 2


class TestTrainAndInfer:
    def test_infer_quadruples_png(self, cli_env, tmp_path, capsys):
        base, cfg_path = cli_env
        lr = np.random.default_rng(0).random((16, 16, 3))
        src = tmp_path / "lr.png"
        dst = tmp_path / "hr.png"
        write_png(src, lr)
        assert cli(["--config", cfg_path, "infer", "--input", str(src),
                    "--output", str(dst)]) == 0
        assert read_png(dst).shape == (64, 64, 3)

    def test_infer_crops_to_multiple_of_four(self, cli_env, tmp_path):
        base, cfg_path = cli_env
        lr = np.random.default_rng(1).random((18, 19, 3))
        src = tmp_path / "odd.png"
        dst = tmp_path / "odd_hr.png"
        write_png(src, lr)
        assert cli(["--config", cfg_path, "infer", "--input", str(src),
                    "--output", str(dst)]) == 0
        assert read_png(dst).shape == (64, 64, 3)

    def test_train_without_prereq_is_runtime_error(self, tiny_dataset_root,
                                                   tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(TINY_CFG_TEMPLATE.format(
            seed=0, run_dir=tmp_path / "r", root=tiny_dataset_root,
            t_iters=1, d_iters=1, s_iters=1))
        assert cli(["--config", str(cfg), "train", "dsn"]) == 2
        assert "translator" in capsys.readouterr().err


class TestEvaluate:
    def test_evaluate_prints_medians_and_writes_report(self, cli_env, capsys):
        base, cfg_path = cli_env
        assert cli(["--config", cfg_path, "evaluate"]) == 0
        out = capsys.readouterr().out
        assert "median psnr" in out
        assert (base / "run" / "report" / "report.csv").exists()


class TestBakePairs:
    def test_writes_pair_pngs(self, cli_env, tmp_path, capsys):
        base, cfg_path = cli_env
        out = tmp_path / "pairs"
        assert cli(["--config", cfg_path, "bake-pairs", "--count", "2",
                    "--out", str(out)]) == 0
        assert sorted(p.name for p in out.glob("*.png")) == [
            "pair0000_hr.png", "pair0000_lr.png",
            "pair0001_hr.png", "pair0001_lr.png"]
        assert read_png(out / "pair0000_lr.png").shape == (8, 8, 3)
        assert read_png(out / "pair0000_hr.png").shape == (32, 32, 3)


class TestGradCheckCommand:
    def test_prints_per_family_lines(self, capsys, monkeypatch):
        # the real oracle runs in the acceptance suite; this checks wiring
        import rainsr.cli as cli_mod
        monkeypatch.setattr(cli_mod, "grad_check",
                            lambda spec, seed, eps: 3e-6)
        assert cli(["grad-check"]) == 0
        out = capsys.readouterr().out
        for family in ("translator_gen", "patch_disc", "dsn", "srn"):
            assert family in out
        assert out.count("ok") == 4

    def test_failing_families_exit_nonzero(self, capsys, monkeypatch):
        import rainsr.cli as cli_mod
        monkeypatch.setattr(cli_mod, "grad_check",
                            lambda spec, seed, eps: 0.5)
        assert cli(["grad-check"]) == 2
        assert "FAIL" in capsys.readouterr().out
