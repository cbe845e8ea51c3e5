import re

import numpy as np
import pytest

from cellcounter.cli import SCHEMA, RunConfig, main
from cellcounter.models import build_counter
from cellcounter.nn import save_checkpoint
from cellcounter.simdata import read_pgm, write_pgm

# Desk-size knobs shared by every CLI run in this file.
BASE = [
    "data.n=6", "data.mask_fraction=1.0", "data.train_fraction=0.5",
    "gen.render_hw=64x64", "gen.output_hw=32x32",
    "gen.count_min=2", "gen.count_max=5", "gen.blur_sigmas=1",
    "gen.noise_std=4", "gen.mean_area=120",
    "fpn.width_multiplier=0.05", "fpn.epochs=2",
    "count.width_multiplier=0.05", "count.fc_dims=16,8,1", "count.epochs=2",
    "count.batch=2",
]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset plus both trained checkpoints, CLI-produced."""
    root = tmp_path_factory.mktemp("cliws")
    args = BASE + [f"data.dir={root}/data",
                   f"paths.fpn_checkpoint={root}/fpn.cckp",
                   f"paths.count_checkpoint={root}/counter.cckp",
                   f"paths.fpn_report={root}/fpn_report.csv",
                   f"paths.count_report={root}/counter_report.csv",
                   f"paths.metrics={root}/metrics.csv",
                   f"paths.failures={root}/failures.csv"]
    assert main(["generate"] + args) == 0
    assert main(["train-fpn"] + args) == 0
    assert main(["train-count"] + args) == 0
    return root, args


class TestRunConfig:
    def test_defaults_cover_schema(self):
        cfg = RunConfig.resolve(None, [])
        assert set(cfg.values) == set(SCHEMA)
        assert cfg["seed"] == 0
        assert cfg["gen.output_hw"] == (192, 256)

    def test_file_comments_and_dotted_keys(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# training\n"
            "fpn.lateral_filters = 64   # trimmed\n"
            "\n"
            "seed = 7\n"
            "fpn.squared_residual = true\n"
            "gen.blur_sigmas = 1, 3\n")
        cfg = RunConfig.resolve(str(path), [])
        assert cfg["fpn.lateral_filters"] == 64
        assert cfg["seed"] == 7
        assert cfg["fpn.squared_residual"] is True
        assert cfg["gen.blur_sigmas"] == (1.0, 3.0)

    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 7\n")
        cfg = RunConfig.resolve(str(path), ["seed=9"])
        assert cfg["seed"] == 9

    def test_last_duplicate_wins(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 1\nseed = 2\n")
        assert RunConfig.resolve(str(path), [])["seed"] == 2

    def test_unknown_key_fatal(self):
        with pytest.raises(ValueError, match="unknown config key 'fpn.lr_rate'"):
            RunConfig.resolve(None, ["fpn.lr_rate=0.1"])

    def test_bad_value_names_key(self):
        with pytest.raises(ValueError, match="fpn.epochs"):
            RunConfig.resolve(None, ["fpn.epochs=soon"])

    def test_bad_hw_names_key(self):
        with pytest.raises(ValueError, match="gen.output_hw"):
            RunConfig.resolve(None, ["gen.output_hw=96:128"])

    def test_override_without_equals(self):
        with pytest.raises(ValueError, match="key=value"):
            RunConfig.resolve(None, ["seed"])

    def test_malformed_file_line_numbered(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 1\nnot a setting\n")
        with pytest.raises(ValueError, match="line 2"):
            RunConfig.resolve(str(path), [])

    def test_header_lines_sorted_and_delimited(self):
        lines = RunConfig.resolve(None, []).header_lines()
        assert lines[0] == "# resolved config"
        assert lines[-1] == "# end config"
        body = lines[1:-1]
        assert body == sorted(body)
        assert "seed = 0" in body

    def test_header_round_trips_through_parser(self, tmp_path):
        cfg = RunConfig.resolve(None, ["gen.blur_sigmas=1,3", "fpn.squared_residual=true"])
        path = tmp_path / "echo.cfg"
        path.write_text("\n".join(cfg.header_lines()) + "\n")
        again = RunConfig.resolve(str(path), [])
        assert again.header_lines() == cfg.header_lines()


class TestExitCodes:
    def test_unknown_key_exits_1(self, capsys):
        code, out, err = run(capsys, "generate", "no.such.key=1")
        assert code == 1
        assert "unknown config key" in err

    def test_missing_config_file_exits_2(self, capsys):
        code, out, err = run(capsys, "generate", "-c", "/no/such/file.cfg")
        assert code == 2

    def test_missing_image_exits_2(self, capsys, workspace):
        root, args = workspace
        code, out, err = run(capsys, "predict", "/no/such/frame.pgm", *args)
        assert code == 2

    def test_corrupt_image_exits_1(self, capsys, tmp_path, workspace):
        root, args = workspace
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"P6\n2 2\n255\n....")
        code, out, err = run(capsys, "predict", str(bad), *args)
        assert code == 1

    def test_bad_subcommand_exits_1(self, capsys):
        code, out, err = run(capsys, "transmogrify")
        assert code == 1

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0


class TestGenerate:
    def test_layout_and_result_lines(self, capsys, tmp_path):
        args = BASE + [f"data.dir={tmp_path}/data", "data.mask_fraction=0.5"]
        code, out, err = run(capsys, "generate", *args)
        assert code == 0
        assert "# resolved config" in out
        assert "generated=6" in out
        assert "masked=3" in out
        assert (tmp_path / "data" / "manifest.csv").exists()
        assert (tmp_path / "data" / "images" / "img_0.pgm").exists()
        assert (tmp_path / "data" / "masks" / "img_2.pgm").exists()
        assert not (tmp_path / "data" / "masks" / "img_3.pgm").exists()

    def test_header_precedes_results(self, capsys, tmp_path):
        args = BASE + [f"data.dir={tmp_path}/data"]
        code, out, err = run(capsys, "generate", *args)
        assert out.index("# end config") < out.index("generated=")


class TestTraining:
    def test_artifacts_exist(self, workspace):
        root, args = workspace
        assert (root / "fpn.cckp").exists()
        assert (root / "counter.cckp").exists()
        report = (root / "fpn_report.csv").read_text()
        assert report.splitlines()[0] == "epoch,train_loss,val_metric,seconds"
        assert len(report.splitlines()) == 3  # header + 2 epochs

    def test_train_fpn_logs_epoch_lines(self, capsys, tmp_path, workspace):
        root, args = workspace
        fresh = [a if not a.startswith("paths.fpn_checkpoint") else
                 f"paths.fpn_checkpoint={tmp_path}/f.cckp" for a in args]
        fresh = [a if not a.startswith("paths.fpn_report") else
                 f"paths.fpn_report={tmp_path}/f.csv" for a in fresh]
        code, out, err = run(capsys, "train-fpn", *fresh)
        assert code == 0
        assert re.search(r"^epoch=1 loss=\d+\.\d{6} val=\d+\.\d{6} sec=\d+\.\d{3}$",
                         out, flags=re.M)
        assert "best_epoch=" in out
        assert "mask_mse=" in out

    def test_train_count_reports_metrics(self, capsys, tmp_path, workspace):
        root, args = workspace
        fresh = [a if not a.startswith("paths.count_checkpoint") else
                 f"paths.count_checkpoint={tmp_path}/c.cckp" for a in args]
        fresh = [a if not a.startswith("paths.count_report") else
                 f"paths.count_report={tmp_path}/c.csv" for a in fresh]
        code, out, err = run(capsys, "train-count", *fresh)
        assert code == 0
        for key in ("mse=", "r2=", "l1_mean=", "l1_max=", "ci_coverage="):
            assert key in out


class TestPredict:
    def test_prints_count_and_ci(self, capsys, workspace):
        root, args = workspace
        code, out, err = run(capsys, "predict", f"{root}/data/images/img_0.pgm", *args)
        assert code == 0
        assert re.search(r"^count=\d+\.\d{2} ci95=\d+\.\d{2}$", out, flags=re.M)

    def test_zero_counter_prints_zero(self, capsys, tmp_path, workspace):
        root, args = workspace
        cfg = RunConfig.resolve(None, list(args))
        model = build_counter(cfg.count_config((32, 32)), seed=0)
        for name, p in model.registry.items():
            p.data[:] = 0.0
        # A zero running variance would make eval-mode batchnorm divide by
        # sqrt(eps); keep the stock unit variance so the output stays exactly 0.
        for name, p in model.registry.items():
            if name.endswith("running_var"):
                p.data[:] = 1.0
        path = tmp_path / "zero.cckp"
        save_checkpoint(model.registry, None, str(path))
        swapped = [a if not a.startswith("paths.count_checkpoint") else
                   f"paths.count_checkpoint={path}" for a in args]
        code, out, err = run(capsys, "predict", f"{root}/data/images/img_0.pgm", *swapped)
        assert code == 0
        assert re.search(r"^count=0\.00 ci95=\d+\.\d{2}$", out, flags=re.M)

    def test_panels_flag_writes_four_files(self, capsys, tmp_path, workspace):
        root, args = workspace
        prefix = str(tmp_path / "panel")
        code, out, err = run(capsys, "predict", f"{root}/data/images/img_1.pgm",
                             "--panels", prefix, *args)
        assert code == 0
        for suffix in ("_input.pgm", "_mask.pgm", "_uncert.pgm", "_saliency.pgm"):
            assert (tmp_path / f"panel{suffix}").exists()

    def test_repeat_runs_identical(self, capsys, workspace):
        root, args = workspace
        _, a, _ = run(capsys, "predict", f"{root}/data/images/img_2.pgm", *args)
        _, b, _ = run(capsys, "predict", f"{root}/data/images/img_2.pgm", *args)
        assert a == b


class TestEvaluate:
    def test_metrics_and_failures_files(self, capsys, workspace):
        root, args = workspace
        code, out, err = run(capsys, "evaluate", *args)
        assert code == 0
        lines = (root / "metrics.csv").read_text().splitlines()
        assert lines[0] == "metric,value"
        assert [l.split(",")[0] for l in lines[1:]] == \
            ["mse", "r2", "l1_mean", "l1_max", "ci_coverage"]
        failures = (root / "failures.csv").read_text().splitlines()
        assert failures[0] == "filename,count,pred,lo,hi"
        n_fail = int(re.search(r"n_failures=(\d+)", out).group(1))
        assert n_fail == len(failures) - 1
        assert "n_eval=3" in out

    def test_split_all_uses_every_sample(self, capsys, workspace):
        root, args = workspace
        code, out, err = run(capsys, "evaluate", "eval.split=all", *args)
        assert code == 0
        assert "n_eval=6" in out

    def test_bad_split_exits_1(self, capsys, workspace):
        root, args = workspace
        code, out, err = run(capsys, "evaluate", "eval.split=validation", *args)
        assert code == 1
        assert "eval.split" in err


class TestSaliencyCommand:
    def test_writes_panels(self, capsys, tmp_path, workspace):
        root, args = workspace
        prefix = str(tmp_path / "sal")
        code, out, err = run(capsys, "saliency", f"{root}/data/images/img_0.pgm",
                             "--out", prefix, *args)
        assert code == 0
        assert "saliency_max=" in out
        for suffix in ("_input.pgm", "_mask.pgm", "_uncert.pgm", "_saliency.pgm"):
            assert (tmp_path / f"sal{suffix}").exists()
        panel = read_pgm(prefix + "_input.pgm")
        assert panel.shape == (32, 32)

    def test_loss_target_needs_truth(self, capsys, workspace):
        root, args = workspace
        code, out, err = run(capsys, "saliency", f"{root}/data/images/img_0.pgm",
                             "interpret.target=loss", *args)
        assert code == 1
        assert "truth" in err

    def test_loss_target_with_truth(self, capsys, tmp_path, workspace):
        root, args = workspace
        prefix = str(tmp_path / "lsal")
        code, out, err = run(capsys, "saliency", f"{root}/data/images/img_0.pgm",
                             "--out", prefix, "interpret.target=loss",
                             "interpret.truth=3", *args)
        assert code == 0
        assert (tmp_path / "lsal_saliency.pgm").exists()

    def test_default_prefix_strips_extension(self, capsys, tmp_path, workspace):
        root, args = workspace
        img = read_pgm(f"{root}/data/images/img_0.pgm")
        local = tmp_path / "frame.pgm"
        write_pgm(img, str(local))
        code, out, err = run(capsys, "saliency", str(local), *args)
        assert code == 0
        assert (tmp_path / "frame_input.pgm").exists()
