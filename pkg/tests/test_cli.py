"""End-to-end CLI behavior with a tiny configuration: command wiring, output
files, determinism flags, and the documented exit codes."""

import numpy as np
import pytest
from click.testing import CliRunner

from oneshot6d import cli, synth
from oneshot6d.config import Config, save_config

TINY = dict(image_size=32, n_points=2048, c_coarse=16, c_fine=8,
            m_template=48, refine_top_k=24, zoom_classes=10,
            n_train_objects=2, n_test_objects=1, n_viewpoints=100,
            epochs=1, warmup_epochs=0, samples_per_object=1, batch_size=1,
            test_template_views=4, test_keypoints=96, queries_per_object=2,
            pnp_iters=32)


@pytest.fixture(scope="module")
def tiny_yaml(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    save_config(Config(**TINY), path)
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_yaml):
    out = tmp_path_factory.mktemp("run")
    result = CliRunner().invoke(cli.main, ["train", "--config", tiny_yaml, "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_gen_data_writes_cache_files(tmp_path, tiny_yaml):
    r = CliRunner().invoke(
        cli.main, ["gen-data", "--config", tiny_yaml, "--out", str(tmp_path), "--count", "2"]
    )
    assert r.exit_code == 0, r.output
    files = sorted(tmp_path.glob("object_*.bin"))
    assert len(files) == 2
    obj = synth.load_object(files[0])
    assert obj.cloud.diameter == pytest.approx(1.0)


def test_gen_data_zero_count_is_empty_input(tmp_path, tiny_yaml):
    r = CliRunner().invoke(
        cli.main, ["gen-data", "--config", tiny_yaml, "--out", str(tmp_path), "--count", "0"]
    )
    assert r.exit_code == 3


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("no_such_field: 1\n")
    r = CliRunner().invoke(
        cli.main, ["gen-data", "--config", str(bad), "--out", str(tmp_path)]
    )
    assert r.exit_code == 2


def test_train_writes_checkpoint_and_metrics(trained):
    assert (trained / "checkpoint.bin").exists()
    lines = (trained / "metrics.csv").read_text().strip().splitlines()
    assert lines[0].split(",")[:4] == ["epoch", "step", "lr", "loss"]
    assert len(lines) >= 2


def test_eval_writes_report_and_curve(tmp_path, tiny_yaml, trained):
    r = CliRunner().invoke(cli.main, [
        "eval", "--config", tiny_yaml,
        "--checkpoint", str(trained / "checkpoint.bin"), "--out", str(tmp_path),
    ])
    assert r.exit_code == 0, r.output
    report = (tmp_path / "report.csv").read_text().strip().splitlines()
    assert report[0].startswith("object_index,query_index")
    curve = (tmp_path / "curve.csv").read_text().strip().splitlines()
    assert curve[0] == "threshold_frac,recall"
    assert len(curve) == 51


def test_export_curves_roundtrip(tmp_path, tiny_yaml, trained):
    ev_dir = tmp_path / "ev"
    r = CliRunner().invoke(cli.main, [
        "eval", "--config", tiny_yaml,
        "--checkpoint", str(trained / "checkpoint.bin"), "--out", str(ev_dir),
    ])
    assert r.exit_code == 0, r.output
    out2 = tmp_path / "curves"
    r2 = CliRunner().invoke(cli.main, [
        "export-curves", "--report", str(ev_dir / "report.csv"), "--out", str(out2),
    ])
    assert r2.exit_code == 0, r2.output
    assert (ev_dir / "curve.csv").read_text() == (out2 / "curve.csv").read_text()


def test_export_curves_rejects_wrong_schema(tmp_path):
    bad = tmp_path / "r.csv"
    bad.write_text("a,b\n1,2\n")
    r = CliRunner().invoke(cli.main, [
        "export-curves", "--report", str(bad), "--out", str(tmp_path / "o"),
    ])
    assert r.exit_code == 2


def test_ablate_prune_csv(tmp_path, tiny_yaml, trained):
    r = CliRunner().invoke(cli.main, [
        "ablate-prune", "--config", tiny_yaml,
        "--checkpoint", str(trained / "checkpoint.bin"), "--out", str(tmp_path),
        "--keep", "1.0", "--keep", "0.5", "--objects", "1", "--queries", "2",
    ])
    assert r.exit_code == 0, r.output
    lines = (tmp_path / "pruning.csv").read_text().strip().splitlines()
    assert lines[0] == "keep_fraction,recall_01d,median_rot_deg,matching_seconds"
    assert len(lines) == 3


def test_ablate_templates_csv(tmp_path, tiny_yaml, trained):
    r = CliRunner().invoke(cli.main, [
        "ablate-templates", "--config", tiny_yaml,
        "--checkpoint", str(trained / "checkpoint.bin"), "--out", str(tmp_path),
        "--fraction", "1.0", "--fraction", "0.5", "--objects", "1", "--queries", "2",
    ])
    assert r.exit_code == 0, r.output
    lines = (tmp_path / "templates.csv").read_text().strip().splitlines()
    assert len(lines) == 3


def test_seed_override_changes_data(tmp_path, tiny_yaml):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for out, seed in ((a, "1"), (b, "1"), (c, "2")):
        r = CliRunner().invoke(cli.main, [
            "gen-data", "--config", tiny_yaml, "--out", str(out),
            "--count", "1", "--seed", seed,
        ])
        assert r.exit_code == 0
    pa = synth.load_object(a / "object_0000.bin").cloud.points
    pb = synth.load_object(b / "object_0000.bin").cloud.points
    pc = synth.load_object(c / "object_0000.bin").cloud.points
    assert np.array_equal(pa, pb)
    assert not np.array_equal(pa, pc)
