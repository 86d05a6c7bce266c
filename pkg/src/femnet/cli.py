"""Command-line entry points.

Commands: mesh, gen-data, train, forecast, eval, superres.  Configuration is
a JSON file (see CONFIG_SCHEMA); command-line flags override config fields.
Every artifact embeds the seed and a hash of the effective configuration.
Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import data as dm
from . import dynamics, training
from .errors import FemnetError, InvalidSpec, KTooLarge
from .mesh import (
    DEFAULT_SLIVER_ANGLE, PointCloud, delaunay_triangulate,
    filter_sliver_cells, load_mesh, make_mesh, save_mesh,
)
from .odeint import SolverConfig, Trajectory, dopri5_solve

# JSON layout of a run configuration; flags override these fields.
CONFIG_SCHEMA = {
    "seed": "int",
    "data": "SyntheticSpec fields plus optional 'resolutions': [int, ...]",
    "model": {
        "variant": "fen | tfen",
        "hidden_width": "int or null (128 for fen, 96 for tfen)",
        "hidden_layers": "int",
        "autonomous": "bool",
        "stationary": "bool",
        "time_period": "float or null",
    },
    "training": {
        "horizon": "int", "lr": "float", "max_epochs": "int",
        "patience": "int", "curriculum_start": "int",
        "train_stride": "int", "val_stride": "int", "shuffle": "bool",
    },
    "solver": {"atol": "float", "rtol": "float", "max_nfe": "int"},
}

_MODEL_DEFAULTS = {
    "variant": "fen",
    "hidden_width": None,
    "hidden_layers": dynamics.DEFAULT_HIDDEN_LAYERS,
    "autonomous": True,
    "stationary": True,
    "time_period": None,
}


class UsageError(Exception):
    pass


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {p} does not exist")
    try:
        config = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise UsageError(f"config file {p} is not valid JSON: {err}") from err
    unknown = set(config) - set(CONFIG_SCHEMA)
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}; "
                         f"known: {sorted(CONFIG_SCHEMA)}")
    return config


def _section(config: dict, name: str, defaults: dict) -> dict:
    merged = dict(defaults)
    section = config.get(name, {})
    unknown = set(section) - set(defaults)
    if unknown:
        raise UsageError(f"unknown keys in config[{name!r}]: {sorted(unknown)}")
    merged.update(section)
    return merged


def _solver_from(config: dict) -> SolverConfig:
    section = _section(config, "solver",
                       {"atol": 1e-6, "rtol": 1e-6, "max_nfe": 10_000})
    return SolverConfig(atol=section["atol"], rtol=section["rtol"],
                        max_nfe=int(section["max_nfe"]))


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_mesh(args) -> None:
    src = _require_dir(args.points, "points file")
    payload = json.loads(src.read_text())
    if "cells" in payload:
        mesh = load_mesh(src)  # externally supplied triangulation
    else:
        points = PointCloud(np.asarray(payload["points"], dtype=np.float64))
        mesh = delaunay_triangulate(points)
    if args.filter_angle_deg > 0:
        mesh = filter_sliver_cells(mesh, np.deg2rad(args.filter_angle_deg))
    save_mesh(mesh, args.out)
    print(f"wrote {args.out}: {len(mesh.points)} points, {mesh.n_cells} cells, "
          f"{mesh.boundary_faces.shape[0]} boundary faces")


def cmd_gen_data(args) -> None:
    config = load_config(args.config)
    if "data" not in config:
        raise UsageError("gen-data needs a config file with a 'data' section")
    data_cfg = dict(config["data"])
    resolutions = data_cfg.pop("resolutions", None)
    if args.seed is not None:
        data_cfg["seed"] = args.seed
    try:
        spec = dm.SyntheticSpec.from_dict(data_cfg)
    except TypeError as err:
        raise UsageError(f"bad 'data' section: {err}") from err
    chash = config_hash({"data": spec.to_dict()})
    ks = [spec.n_nodes] + [k for k in (resolutions or []) if k != spec.n_nodes]
    datasets = dm.generate_resolution_family(spec, ks)
    out = Path(args.out)
    paths = []
    for k, ds in zip(ks, datasets):
        ds.meta["config_hash"] = chash
        path = out if k == spec.n_nodes else Path(f"{out}-n{k}")
        dm.write_dataset(ds, path)
        paths.append(path)
        print(f"wrote {path}: {ds.n_nodes} nodes, "
              f"{len(ds.sequences)} sequences, m={ds.m}")


def cmd_train(args) -> None:
    config = load_config(args.config)
    data_dir = _require_dir(args.data, "dataset directory")
    dataset = dm.read_dataset(data_dir)

    model_cfg = _section(config, "model", _MODEL_DEFAULTS)
    if args.variant is not None:
        model_cfg["variant"] = args.variant
    train_cfg = _section(config, "training", {
        "horizon": 10, "lr": 1e-3, "max_epochs": 50, "patience": 5,
        "curriculum_start": 3, "train_stride": 1, "val_stride": 1,
        "shuffle": True,
    })
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    effective = {"model": model_cfg, "training": train_cfg, "seed": seed,
                 "solver": _section(config, "solver",
                                    {"atol": 1e-6, "rtol": 1e-6, "max_nfe": 10_000})}
    chash = config_hash(effective)

    model = dynamics.build_model(
        model_cfg["variant"], m=dataset.m, seed=seed,
        hidden_width=model_cfg["hidden_width"],
        hidden_layers=int(model_cfg["hidden_layers"]),
        autonomous=bool(model_cfg["autonomous"]),
        stationary=bool(model_cfg["stationary"]),
        time_period=model_cfg["time_period"],
    )
    tconf = training.TrainConfig(
        horizon=int(train_cfg["horizon"]), lr=float(train_cfg["lr"]),
        max_epochs=int(train_cfg["max_epochs"]), patience=int(train_cfg["patience"]),
        curriculum_start=int(train_cfg["curriculum_start"]), seed=seed,
        solver=_solver_from(config),
        train_stride=int(train_cfg["train_stride"]),
        val_stride=int(train_cfg["val_stride"]),
        shuffle=bool(train_cfg["shuffle"]),
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, history = training.train(model, dataset, tconf)

    log_path = out / "log.jsonl"
    with log_path.open("w") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    best_epoch = int(np.argmin([h["val_mae"] for h in history]))
    meta = {
        "seed": seed,
        "config_hash": chash,
        "hidden_width": model.freeform.weights[0].data.shape[0],
        "best_val_mae": history[best_epoch]["val_mae"],
        "best_epoch": best_epoch,
        "epochs_run": len(history),
        "horizon": tconf.horizon,
        "data": str(data_dir),
    }
    dynamics.save_model(out / "best", model, meta)
    print(f"wrote {out}/best.json+bin after {len(history)} epochs; "
          f"best val MAE {meta['best_val_mae']:.6g} at epoch {best_epoch}")


def _load_checkpoint(path: str):
    prefix = Path(path)
    if not prefix.with_suffix(".json").exists():
        raise UsageError(f"checkpoint {prefix}.json does not exist")
    return dynamics.load_model(prefix)


def cmd_forecast(args) -> None:
    model, meta = _load_checkpoint(args.checkpoint)
    dataset = dm.read_dataset(_require_dir(args.data, "dataset directory"))
    if not 0 <= args.sequence < len(dataset.sequences):
        raise UsageError(f"sequence {args.sequence} out of range "
                         f"(dataset has {len(dataset.sequences)})")
    seq = dataset.sequences[args.sequence]
    if args.horizon > len(seq.times) - 1:
        raise UsageError(f"horizon {args.horizon} exceeds sequence length "
                         f"{len(seq.times) - 1}")
    art = dataset.artifacts()
    f = dynamics.derivative_fn(model, art)
    times = seq.times[:args.horizon + 1]
    y0 = np.asarray(seq.states[0])
    if args.horizon == 0:
        traj = Trajectory(times=times, states=[y0], nfe=0)
    else:
        traj = dopri5_solve(f, y0, times, _solver_from(load_config(args.config)))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dm._write_sequence(out / "forecast.bin", traj)
    (out / "forecast.json").write_text(json.dumps({
        "sequence": args.sequence,
        "horizon": args.horizon,
        "nfe": traj.nfe,
        "seed": meta.get("seed"),
        "config_hash": meta.get("config_hash"),
    }, sort_keys=True))
    if args.dump_terms:
        _dump_terms(out, model, art, traj)
    print(f"wrote {out}/forecast.bin ({args.horizon} steps, nfe={traj.nfe})")


def _dump_terms(out: Path, model, art, traj: Trajectory) -> None:
    """Per-node term contributions and per-cell velocities at each output time."""
    coords = art.mesh.points.coords
    with (out / "terms_nodes.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "node", "x", "y", "feature",
                         "freeform", "transport"])
        for t, state in zip(traj.times, traj.states):
            _, ff, tr = dynamics.time_derivative_terms(
                model, float(t), np.asarray(state), art)
            for i in range(art.n_nodes):
                for k in range(model.m):
                    writer.writerow([
                        f"{t:.12g}", i, f"{coords[i, 0]:.12g}", f"{coords[i, 1]:.12g}",
                        k, f"{ff[i, k]:.12g}",
                        "" if tr is None else f"{tr[i, k]:.12g}",
                    ])
    if model.transport is None:
        return
    with (out / "terms_cells.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "cell", "center_x", "center_y", "feature",
                         "velocity_x", "velocity_y"])
        for t, state in zip(traj.times, traj.states):
            vel = dynamics.cell_velocities(model, float(t), np.asarray(state), art)
            for c in range(art.n_cells):
                for k in range(model.m):
                    writer.writerow([
                        f"{t:.12g}", c,
                        f"{art.centers[c, 0]:.12g}", f"{art.centers[c, 1]:.12g}",
                        k, f"{vel[c, k, 0]:.12g}", f"{vel[c, k, 1]:.12g}",
                    ])


_REPORT_COLUMNS = ["n_nodes", "mae", "nfe_mean", "nfe_std",
                   "persistence_mae", "n_sequences"]


def _write_reports(out: Path, name: str, reports: list[dict]) -> None:
    (out / f"{name}.json").write_text(json.dumps(reports, sort_keys=True))
    with (out / f"{name}.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_REPORT_COLUMNS)
        for r in reports:
            writer.writerow([r[c] for c in _REPORT_COLUMNS])


def cmd_eval(args) -> None:
    model, meta = _load_checkpoint(args.checkpoint)
    dataset = dm.read_dataset(_require_dir(args.data, "dataset directory"))
    report = training.evaluate(
        model, dataset, args.split, args.horizon,
        _solver_from(load_config(args.config)), skip=args.skip)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload.update({"seed": meta.get("seed"), "config_hash": meta.get("config_hash"),
                    "split": args.split, "horizon": args.horizon})
    _write_reports(out, "report", [payload])
    print(f"MAE {report.mae:.6g} (persistence {report.persistence_mae:.6g}), "
          f"NFE {report.nfe_mean:.1f} +- {report.nfe_std:.1f}")


def cmd_superres(args) -> None:
    model, meta = _load_checkpoint(args.checkpoint)
    datasets = [dm.read_dataset(_require_dir(d, "dataset directory"))
                for d in args.data]
    reports = training.super_resolution_eval(
        model, datasets, args.horizon,
        _solver_from(load_config(args.config)), split=args.split, skip=args.skip)
    rows = []
    for ds, rep in zip(datasets, reports):
        row = rep.to_dict()
        row.update({"seed": meta.get("seed"), "config_hash": meta.get("config_hash")})
        rows.append(row)
    rows.sort(key=lambda r: r["n_nodes"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_reports(out, "superres", rows)
    for r in rows:
        print(f"{r['n_nodes']:6d} nodes: MAE {r['mae']:.6g}, "
              f"NFE {r['nfe_mean']:.1f}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="femnet",
        description="Finite-element message passing for spatio-temporal forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="triangulate a point file")
    p.add_argument("--points", required=True)
    p.add_argument("--filter-angle-deg", type=float,
                   default=float(np.rad2deg(DEFAULT_SLIVER_ANGLE)))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--variant", choices=["fen", "tfen"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="roll a checkpoint forward in time")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sequence", type=int, default=0)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--dump-terms", action="store_true")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--skip", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("superres", help="evaluate one checkpoint across resolutions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--skip", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_superres)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    try:
        args.func(args)
    except (UsageError, InvalidSpec, KTooLarge) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FemnetError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
