"""Command line entry points.

Exit codes: 0 success, 2 bad configuration, 3 empty input, 4 divergence.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import evaluate as ev
from . import synth
from . import train as tr
from .config import PRESETS, desk_config, load_config
from .errors import OneShot6DError
from .model import PoseModel, load_checkpoint
from .train import TrainingDiverged

EXIT_CONFIG = 2
EXIT_EMPTY = 3
EXIT_DIVERGED = 4


def _load_cfg(config, preset, seed):
    if config is not None:
        cfg = load_config(Path(config))
    else:
        cfg = PRESETS[preset]()
    if seed is not None:
        cfg = type(cfg)(**{**cfg.__dict__, "seed": seed})
    return cfg


def _cfg_options(f):
    f = click.option("--config", type=click.Path(exists=True), default=None,
                     help="YAML config file; overrides --preset.")(f)
    f = click.option("--preset", type=click.Choice(sorted(PRESETS)), default="desk")(f)
    f = click.option("--seed", type=int, default=None, help="Override the config seed.")(f)
    return f


@click.group()
def main():
    """One-shot 6D pose estimation by pixel-to-point feature matching."""


@main.command("gen-data")
@_cfg_options
@click.option("--out", type=click.Path(), required=True)
@click.option("--count", type=int, default=None, help="Objects to generate.")
@click.option("--test", is_flag=True, help="Use the held-out seed range.")
def gen_data(config, preset, seed, out, count, test):
    """Generate synthetic objects into a directory of cache files."""
    try:
        cfg = _load_cfg(config, preset, seed)
    except (OneShot6DError, ValueError, KeyError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    n = count if count is not None else (cfg.n_test_objects if test else cfg.n_train_objects)
    if n <= 0:
        click.echo("nothing to generate", err=True)
        sys.exit(EXIT_EMPTY)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        obj = tr.make_object(cfg, i, test)
        synth.save_object(out / f"object_{i:04d}.bin", obj)
    click.echo(f"wrote {n} objects to {out}")


@main.command()
@_cfg_options
@click.option("--out", type=click.Path(), required=True)
@click.option("--resume", type=click.Path(exists=True), default=None)
def train(config, preset, seed, out, resume):
    """Train a matcher from scratch on synthetic objects."""
    try:
        cfg = _load_cfg(config, preset, seed)
    except (OneShot6DError, ValueError, KeyError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    if cfg.n_train_objects <= 0:
        click.echo("no training objects", err=True)
        sys.exit(EXIT_EMPTY)
    try:
        tr.train(cfg, Path(out), resume=Path(resume) if resume else None, log=click.echo)
    except TrainingDiverged as e:
        click.echo(f"training diverged: {e}", err=True)
        sys.exit(EXIT_DIVERGED)


def _load_model(checkpoint, config, preset, seed):
    cfg = _load_cfg(config, preset, seed)
    model, _, _ = load_checkpoint(Path(checkpoint), cfg)
    return model, cfg


def _test_set(cfg, count=None):
    n = count if count is not None else cfg.n_test_objects
    objects = [tr.make_object(cfg, i, test=True) for i in range(n)]
    viewpoints = [tr.make_viewpoints(cfg, i, test=True) for i in range(n)]
    return objects, viewpoints


@main.command("eval")
@_cfg_options
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--objects", "n_objects", type=int, default=None)
@click.option("--queries", type=int, default=None, help="Queries per object.")
def eval_cmd(config, preset, seed, checkpoint, out, n_objects, queries):
    """Evaluate a checkpoint on held-out objects; writes report.csv + curve.csv."""
    try:
        model, cfg = _load_model(checkpoint, config, preset, seed)
    except (OneShot6DError, ValueError, KeyError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    objects, viewpoints = _test_set(cfg, n_objects)
    if not objects:
        click.echo("no test objects", err=True)
        sys.exit(EXIT_EMPTY)
    report = ev.evaluate(model, objects, viewpoints, cfg, queries, log=click.echo)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ev.write_report_csv(report, out / "report.csv")
    ev.write_curve_csv(report, out / "curve.csv")
    click.echo(
        f"recall@0.1d {report.recall_at(0.1):.3f}, "
        f"median rotation error {report.median_rotation_error():.2f} deg"
    )


@main.command("ablate-prune")
@_cfg_options
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--keep", "keeps", type=float, multiple=True, default=(1.0, 0.5, 0.1))
@click.option("--objects", "n_objects", type=int, default=4)
@click.option("--queries", type=int, default=10)
def ablate_prune(config, preset, seed, checkpoint, out, keeps, n_objects, queries):
    """Sweep the pruning keep fraction; writes pruning.csv."""
    try:
        model, cfg = _load_model(checkpoint, config, preset, seed)
    except (OneShot6DError, ValueError, KeyError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    objects, viewpoints = _test_set(cfg, n_objects)
    if not objects:
        click.echo("no test objects", err=True)
        sys.exit(EXIT_EMPTY)
    rows = ev.ablate_pruning(model, objects, viewpoints, keeps, queries)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ev.write_ablation_csv(rows, out / "pruning.csv")
    for r in rows:
        click.echo(f"keep {r['keep_fraction']}: recall@0.1d {r['recall_01d']:.3f}, "
                   f"matching {r['matching_seconds'] * 1e3:.1f} ms")


@main.command("ablate-templates")
@_cfg_options
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--fraction", "fractions", type=float, multiple=True,
              default=(1.0, 0.5, 0.25, 0.1))
@click.option("--objects", "n_objects", type=int, default=4)
@click.option("--queries", type=int, default=10)
def ablate_templates(config, preset, seed, checkpoint, out, fractions, n_objects, queries):
    """Sweep the template view budget; writes templates.csv."""
    try:
        model, cfg = _load_model(checkpoint, config, preset, seed)
    except (OneShot6DError, ValueError, KeyError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    objects, viewpoints = _test_set(cfg, n_objects)
    if not objects:
        click.echo("no test objects", err=True)
        sys.exit(EXIT_EMPTY)
    rows = ev.ablate_templates(model, objects, viewpoints, fractions, queries)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ev.write_ablation_csv(rows, out / "templates.csv")
    for r in rows:
        click.echo(f"{r['n_template_views']} views: recall@0.1d {r['recall_01d']:.3f}")


@main.command("match-dump")
@_cfg_options
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--object-index", type=int, default=0)
@click.option("--query-index", type=int, default=0)
def match_dump(config, preset, seed, checkpoint, out, object_index, query_index):
    """Dump the match set of one held-out query as matches.csv."""
    try:
        model, cfg = _load_model(checkpoint, config, preset, seed)
    except (OneShot6DError, ValueError, KeyError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    obj = tr.make_object(cfg, object_index, test=True)
    views = tr.make_viewpoints(cfg, object_index, test=True)
    bank = ev.build_bank(model, obj, views, cfg)
    cam = synth.default_camera(cfg.image_size, cfg.focal)
    qrng = np.random.default_rng(cfg.seed * 97 + object_index)
    query = None
    for qi in range(query_index + 1):
        eye = qrng.standard_normal(3)
        eye = eye / np.linalg.norm(eye) * cfg.view_distance
        query = synth.render(obj, synth.look_at_pose(eye), cam)
    res = ev.infer(model, bank, query)
    if res.match_pixels is None or len(res.match_pixels) == 0:
        click.echo("no matches for this query", err=True)
        sys.exit(EXIT_EMPTY)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ev.write_matches_csv(res, out / "matches.csv")
    click.echo(f"wrote {len(res.match_pixels)} matches")


@main.command("export-curves")
@click.option("--report", type=click.Path(exists=True), required=True,
              help="report.csv produced by the eval command.")
@click.option("--out", type=click.Path(), required=True)
@click.option("--points", type=int, default=50)
def export_curves(report, out, points):
    """Recompute the recall/threshold curve from a per-query report CSV."""
    import csv as _csv

    rep = ev.EvalReport()
    with open(report, newline="") as f:
        reader = _csv.DictReader(f)
        expected = {"object_index", "query_index", "n_matches", "n_inliers",
                    "add", "add_pnp", "rot_err_deg", "trans_err", "diameter", "failure"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            click.echo("report.csv has the wrong schema", err=True)
            sys.exit(EXIT_CONFIG)
        for row in reader:
            rep.rows.append(ev.EvalRow(
                int(row["object_index"]), int(row["query_index"]),
                int(row["n_matches"]), int(row["n_inliers"]),
                float(row["add"]), float(row["add_pnp"]), float(row["rot_err_deg"]),
                float(row["trans_err"]), float(row["diameter"]), row["failure"],
            ))
    if not rep.rows:
        click.echo("empty report", err=True)
        sys.exit(EXIT_EMPTY)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ts, rec = rep.threshold_curve(points)
    with open(out / "curve.csv", "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["threshold_frac", "recall"])
        for t, r in zip(ts, rec):
            w.writerow([f"{t:.6g}", f"{r:.6g}"])
    click.echo(f"wrote curve with {points} points")


if __name__ == "__main__":
    main()
