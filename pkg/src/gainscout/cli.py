"""Command-line harness: environment/field generation, model fitting,
experiment sweeps and aggregation.

All outputs land under the ``--out`` root; files are written atomically so
an interrupted sweep never leaves half-written artifacts.  The run grid is
embarrassingly parallel; ``--jobs`` (or the GAINSCOUT_JOBS environment
variable, which wins) bounds the worker pool.  The metrics CSV is assembled
after all workers finish, in deterministic run order, so identical
invocations produce identical bytes.
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import io
import json
import os
import sys
import traceback

import click
import numpy as np

from ._util import atomic_write_text, config_hash, substream
from .channel import TruthParams, load_field, save_field, synthesize_field
from .grid import GenParams, crop_world, generate_world, load_world, save_world
from .kriging import KrigingModel, fit_kernel, fit_path_loss, load_model, save_model
from .metrics import N_BINS, evaluate, evaluation_mask, rmse
from .mission import MissionConfig, run_mission, save_result
from .kriging import posterior

CSV_SCHEMA_VERSION = 1

TX_LATTICE_SPACING_M = 97.2
TX_ALTITUDE_M = 2.0

METRIC_COLUMNS = (
    ["schema_version", "run_id", "planner", "n_uavs", "horizon", "seed",
     "rmse_db", "goodness_of_fit", "n_visited", "n_evaluated"]
    + [f"bin_rmse_{b:02d}" for b in range(N_BINS)]
)


@click.group()
def main():
    """Active channel-gain mapping experiments."""


def _file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# gen-env
# ---------------------------------------------------------------------------


@main.command("gen-env")
@click.option("--seed", type=int, required=True, help="base seed; world i uses seed+i")
@click.option("--count", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--side-m", type=float, default=486.0, show_default=True)
@click.option("--spacing-m", type=float, default=4.0, show_default=True)
@click.option("--crop-m", type=float, default=None, help="optional random square crop")
def gen_env(seed, count, out, side_m, spacing_m, crop_m):
    """Generate procedural urban worlds, one JSON file per seed."""
    os.makedirs(out, exist_ok=True)
    params = GenParams(side_m=side_m, spacing_m=spacing_m)
    for i in range(count):
        s = seed + i
        world = generate_world(s, params)
        if crop_m is not None:
            world = crop_world(world, s, crop_m)
        path = os.path.join(out, f"world-{s}.json")
        save_world(world, path)
        click.echo(path)


# ---------------------------------------------------------------------------
# gen-field
# ---------------------------------------------------------------------------


def _tx_lattice(world, spacing_m, altitude_m):
    """Uniformly spaced transmitter candidates; indoor positions dropped."""
    lx = world.spec.length_m
    ly = world.spec.width_m
    d = world.spec.spacing_m
    nx_tx = max(1, int(lx // spacing_m))
    ny_tx = max(1, int(ly // spacing_m))
    out = []
    for a in range(nx_tx):
        for b in range(ny_tx):
            x = (a + 0.5) * spacing_m
            y = (b + 0.5) * spacing_m
            if x > lx or y > ly:
                continue
            i, j = int(round(x / d)), int(round(y / d))
            i = min(max(i, 0), world.nx - 1)
            j = min(max(j, 0), world.ny - 1)
            if world.heights[i, j] >= altitude_m:
                continue  # indoor
            out.append((x, y, altitude_m))
    return out


@main.command("gen-field")
@click.option("--world", "world_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--tx-spacing-m", type=float, default=TX_LATTICE_SPACING_M, show_default=True)
@click.option("--tx-altitude-m", type=float, default=TX_ALTITUDE_M, show_default=True)
@click.option("--max-tx", type=int, default=None, help="keep only the first K transmitters")
def gen_field(world_path, seed, out, tx_spacing_m, tx_altitude_m, max_tx):
    """Synthesize ground-truth gain fields on a lattice of transmitters."""
    os.makedirs(out, exist_ok=True)
    world = load_world(world_path)
    txs = _tx_lattice(world, tx_spacing_m, tx_altitude_m)
    if max_tx is not None:
        txs = txs[:max_tx]
    if not txs:
        raise click.ClickException("no outdoor transmitter positions on the lattice")
    for k, tx in enumerate(txs):
        field_ = synthesize_field(world, np.array(tx), seed, TruthParams())
        path = os.path.join(out, f"field-s{seed}-tx{k}.json")
        save_field(field_, path)
        click.echo(path)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


@main.command("fit")
@click.option("--world", "world_path", type=click.Path(exists=True), required=True)
@click.option("--field", "field_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--n-samples", type=int, default=300, show_default=True)
def fit(world_path, field_path, seed, out, n_samples):
    """Fit Kriging model parameters from random flight-plane samples."""
    world = load_world(world_path)
    field_ = load_field(field_path)
    rng = np.random.default_rng(substream(seed, "fit-samples"))
    outdoor = np.flatnonzero(world.outdoor_mask(world.spec.uav_altitude_m).ravel())
    if len(outdoor) < 2:
        raise click.ClickException("not enough outdoor cells to fit")
    n = min(n_samples, len(outdoor))
    pick = rng.choice(outdoor, size=n, replace=False)
    coords = world.plane_coords(world.spec.uav_altitude_m)[pick]
    gains = field_.uav_plane[pick]
    dists = np.linalg.norm(coords - np.asarray(field_.tx, dtype=float), axis=1)
    floor = world.spec.spacing_m / 2.0
    alpha, beta = fit_path_loss(np.maximum(dists, floor), gains)
    resid = gains - (alpha - beta * np.log(np.maximum(dists, floor)))
    phi, delta, nll = fit_kernel(coords, resid)
    model = KrigingModel(
        alpha=alpha, beta=beta, phi=phi, delta=delta,
        distance_floor_m=floor,
        fit_metadata={"n_samples": int(n), "nll": nll, "seed": seed,
                      "field": os.path.basename(field_path)},
    )
    save_model(model, out)
    click.echo(out)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _one_run(args):
    (world_path, field_path, model_path, planner, n_uavs, horizon, seed,
     start_mode, checkpoint_every, out_dir, run_id) = args
    world = load_world(world_path)
    field_ = load_field(field_path)
    model = load_model(model_path)
    cfg = MissionConfig(
        planner=planner, n_uavs=n_uavs, horizon=horizon, seed=seed,
        start_mode=start_mode, checkpoint_every=checkpoint_every,
    )
    res = run_mission(world, field_, model, cfg)
    save_result(res, os.path.join(out_dir, f"result-{run_id}.json"))
    m = evaluate(world, field_.pred_plane, res)

    checkpoint_rows = []
    if checkpoint_every > 0:
        for step in range(checkpoint_every, horizon + 1, checkpoint_every):
            kept = [k for k, (_, _, s) in enumerate(res.log.visited) if s <= step]
            cells = [res.log.cells[k] for k in kept]
            obs = np.array([res.log.coords(world)[k] for k in kept])
            y = res.log.y()[kept]
            post = posterior(model, field_.tx, obs, y,
                             world.plane_coords(world.spec.pred_altitude_m))
            mask = evaluation_mask(world, cells)
            checkpoint_rows.append(
                {"run_id": run_id, "step": step,
                 "rmse_db": rmse(field_.pred_plane, post.mean, mask)}
            )

    row = {
        "schema_version": CSV_SCHEMA_VERSION,
        "run_id": run_id,
        "planner": planner,
        "n_uavs": n_uavs,
        "horizon": horizon,
        "seed": seed,
        "rmse_db": m["rmse_db"],
        "goodness_of_fit": m["goodness_of_fit"],
        "n_visited": m["n_visited"],
        "n_evaluated": m["n_evaluated"],
    }
    for b in range(N_BINS):
        v = m["bin_rmse"][b]
        row[f"bin_rmse_{b:02d}"] = "" if v is None else v
    return row, checkpoint_rows


@main.command("run")
@click.option("--world", "world_path", type=click.Path(exists=True), required=True)
@click.option("--field", "field_paths", type=click.Path(exists=True), multiple=True, required=True)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--planner", "planners", multiple=True, required=True)
@click.option("--n-uavs", "n_uavs_list", type=int, multiple=True, default=(1,), show_default=True)
@click.option("--horizon", "horizons", type=int, multiple=True, required=True)
@click.option("--seed", "seeds", type=int, multiple=True, required=True)
@click.option("--start-mode", type=click.Choice(["rectangle", "aoi"]), default="rectangle", show_default=True)
@click.option("--checkpoint-every", type=int, default=0, show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True,
              help="worker processes; env GAINSCOUT_JOBS overrides")
@click.option("--out", type=click.Path(), required=True)
def run(world_path, field_paths, model_path, planners, n_uavs_list, horizons,
        seeds, start_mode, checkpoint_every, jobs, out):
    """Execute the planner x N x T x seed grid and write a metrics CSV."""
    jobs = int(os.environ.get("GAINSCOUT_JOBS", jobs))
    os.makedirs(out, exist_ok=True)

    tasks = []
    for field_path in field_paths:
        for planner in planners:
            for n_uavs in n_uavs_list:
                for horizon in horizons:
                    for seed in seeds:
                        ident = {
                            "schema_version": CSV_SCHEMA_VERSION,
                            "world": _file_hash(world_path),
                            "field": _file_hash(field_path),
                            "model": _file_hash(model_path),
                            "planner": planner,
                            "n_uavs": n_uavs,
                            "horizon": horizon,
                            "seed": seed,
                            "start_mode": start_mode,
                        }
                        run_id = config_hash(ident)
                        tasks.append((world_path, field_path, model_path,
                                      planner, n_uavs, horizon, seed,
                                      start_mode, checkpoint_every, out, run_id))

    results = [None] * len(tasks)
    failures = []
    if jobs <= 1:
        it = ((i, _try_run(t)) for i, t in enumerate(tasks))
        for i, outcome in it:
            results[i] = outcome
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {pool.submit(_try_run, t): i for i, t in enumerate(tasks)}
            for fut in concurrent.futures.as_completed(futs):
                results[futs[fut]] = fut.result()

    rows, checkpoint_rows = [], []
    for task, outcome in zip(tasks, results):
        ok, payload = outcome
        if ok:
            row, crows = payload
            rows.append(row)
            checkpoint_rows.extend(crows)
        else:
            failures.append({"run_id": task[-1], "error": payload})
            click.echo(f"run {task[-1]} failed: {payload}", err=True)

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(os.path.join(out, "metrics.csv"), buf.getvalue())

    if checkpoint_every > 0:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["run_id", "step", "rmse_db"],
                                lineterminator="\n")
        writer.writeheader()
        for row in checkpoint_rows:
            writer.writerow(row)
        atomic_write_text(os.path.join(out, "checkpoints.csv"), buf.getvalue())

    if failures:
        atomic_write_text(os.path.join(out, "failures.json"), json.dumps(failures, indent=2))
        sys.exit(1)
    click.echo(os.path.join(out, "metrics.csv"))


def _try_run(task):
    try:
        return True, _one_run(task)
    except Exception:
        return False, traceback.format_exc()


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@main.command("report")
@click.option("--metrics", "metrics_paths", type=click.Path(exists=True),
              multiple=True, required=True)
@click.option("--out", type=click.Path(), required=True)
def report(metrics_paths, out):
    """Aggregate metrics CSVs into per-(planner, horizon) mean +- stderr."""
    rows = []
    fieldnames = None
    for path in metrics_paths:
        with open(path) as f:
            reader = csv.DictReader(f)
            if fieldnames is None:
                fieldnames = reader.fieldnames
            elif reader.fieldnames != fieldnames:
                raise click.ClickException(f"schema mismatch in {path}")
            rows.extend(reader)
    if not rows:
        raise click.ClickException("no metric rows found")

    groups = {}
    for row in rows:
        key = (row["planner"], int(row["horizon"]))
        groups.setdefault(key, []).append(float(row["rmse_db"]))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["planner", "horizon", "n_runs", "rmse_mean", "rmse_stderr"])
    for key in sorted(groups):
        vals = np.array(groups[key])
        mean = float(np.mean(vals))
        stderr = 0.0 if len(vals) < 2 else float(np.std(vals, ddof=1) / np.sqrt(len(vals)))
        writer.writerow([key[0], key[1], len(vals), mean, stderr])
    atomic_write_text(out, buf.getvalue())
    click.echo(out)


if __name__ == "__main__":
    main()
