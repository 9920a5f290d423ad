"""Command-line driver: simulation, table dumps, validation, datasets,
training, inference, figure emission and a tiny end-to-end pipeline.

Exit codes: 0 success, 1 usage, 2 validation (bad config or inputs),
3 runtime failure.  Logs go to stderr; data only to files.  Every
subcommand honors --seed and is deterministic under it.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import dataset as ds_mod
from . import detection, engine, inverse, mie, oracle
from .engine import ConfigError, SimConfig
from .mie import MieError
from .transport import TransportError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _log(msg):
    print(msg, file=sys.stderr)


def _write_atomic_bytes(path, blob: bytes):
    # Stage to <path>.tmp and rename so an interrupted run leaves either
    # the old file or nothing, never a partial target.
    tmp = str(path) + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_atomic_text(path, text: str):
    _write_atomic_bytes(path, text.encode())


def _write_json(path, obj):
    _write_atomic_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> SimConfig:
    if not args.config:
        raise ConfigError("a --config file is required")
    if not os.path.exists(args.config):
        raise ConfigError(f"config file not found: {args.config}")
    cfg = SimConfig.from_json(args.config)
    if getattr(args, "photons", None) is not None:
        cfg = replace(cfg, n_photons=args.photons)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "workers", None) is not None:
        cfg = replace(cfg, n_workers=args.workers)
    return cfg


def _check_outdir(path):
    d = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(d) or not os.access(d, os.W_OK):
        raise ConfigError(f"output directory not writable: {d}")


def cmd_simulate(args):
    cfg = _load_config(args)
    cfg.validate()
    _check_outdir(args.out)
    result = engine.run(cfg)
    detection.write_polg(result.grid, args.out)
    meta = {"ledger": result.ledger, "diagnostics": result.diagnostics,
            "n_photons": result.n_photons, "seed": cfg.seed,
            "lateral_mode": cfg.detector.lateral_mode,
            "overflow_weight": float(result.grid.overflow[0]),
            "overflow_count": int(result.grid.overflow[9])}
    _write_json(args.out + ".json", meta)
    _log(f"simulated {result.n_photons} photons -> {args.out} "
         f"(ledger balance {result.ledger_balance():.2e})")
    return EXIT_OK


def cmd_mietable(args):
    cfg = _load_config(args)
    table = mie.build_mie_table(cfg.medium, cfg.wavelength, cfg.n_theta)
    _check_outdir(args.out)
    lines = ["theta_deg,re_s1,im_s1,re_s2,im_s2,s11,s12"]
    for i in range(table.n_theta):
        lines.append(
            f"{math.degrees(table.theta[i]):.6f},"
            f"{table.s1[i].real:.12g},{table.s1[i].imag:.12g},"
            f"{table.s2[i].real:.12g},{table.s2[i].imag:.12g},"
            f"{table.s11[i]:.12g},{table.s12[i]:.12g}")
    _write_atomic_text(args.out, "\n".join(lines) + "\n")
    _write_json(args.out + ".json", mie.table_header(table))
    _log(f"wrote {table.n_theta}-point table -> {args.out}")
    return EXIT_OK


def cmd_validate(args):
    cfg = _load_config(args)
    angles = [float(a) for a in args.angles.split(",")] if args.angles else [0.0]
    _check_outdir(args.out)
    rows = oracle.validate_reflectance(cfg, angles)
    oracle.write_validation_csv(rows, args.out)
    for deg, rt, rs, se in rows:
        _log(f"theta={deg:6.2f} deg  R_theory={rt:.4e}  R_sim={rs:.4e}  "
             f"stderr={se:.1e}")
    return EXIT_OK


def _parse_ranges(spec):
    out = {}
    if not spec:
        return {"n_particle": (1.1, 1.5)}
    for part in spec.split(","):
        name, _, rng = part.partition("=")
        lo, _, hi = rng.partition(":")
        out[name.strip()] = (float(lo), float(hi))
    return out


def cmd_dataset(args):
    cfg = _load_config(args)
    ranges = _parse_ranges(args.ranges)
    _check_outdir(args.out)
    shape = tuple(int(v) for v in args.feature_shape.split("x"))
    data, report = ds_mod.sweep(cfg, ranges, args.samples, args.seed or 0,
                                feature_shape=shape)
    if report["failed"]:
        _log(f"warning: {report['failed']} of {report['requested']} samples "
             f"failed: {report['failures'][:3]}")
    if not data.samples:
        raise TransportError("all sweep samples failed")
    ds_mod.write_pold(data, args.out)
    if args.csv:
        ds_mod.write_csv(data, args.csv)
    _log(f"wrote {len(data)} samples ({data.feature_len} features) -> {args.out}")
    return EXIT_OK


def cmd_train(args):
    data = ds_mod.read_pold(args.dataset)
    train_ds, test_ds = ds_mod.split(data, 0.7, args.seed or 0)
    train_norm, norm = ds_mod.normalize_features(train_ds)
    test_norm = ds_mod.apply_normalization(test_ds, norm)
    net = inverse.Network(data.feature_len, data.target_len,
                          width=args.width, n_blocks=args.blocks,
                          latent=args.latent, seed=args.seed or 0,
                          target_names=data.target_names)
    result = inverse.train(net, train_norm, test_norm, steps=args.steps,
                           batch_size=args.batch, seed=args.seed or 0,
                           base_lr=args.lr, epochs=args.epochs)
    net.set_params_vector(result.best_params)
    _check_outdir(args.out)
    inverse.write_poln(net, norm, args.out)
    if args.curves:
        lines = ["step,train_loss,val_loss"]
        val = dict(result.val_curve)
        for step, loss in result.train_curve:
            v = val.get(step, "")
            lines.append(f"{step},{loss:.12g},{v if v == '' else f'{v:.12g}'}")
        _write_atomic_text(args.curves, "\n".join(lines) + "\n")
    _log(f"trained {result.train_curve[-1][0]} steps; "
         f"best validation loss {result.best_val:.6g} -> {args.out}")
    return EXIT_OK


def cmd_infer(args):
    net, norm = inverse.read_poln(args.model)
    grid = detection.read_polg(args.grid)
    meta_path = args.meta or (args.grid + ".json")
    if args.launched is not None:
        launched = args.launched
    elif os.path.exists(meta_path):
        with open(meta_path) as fh:
            launched = json.load(fh)["ledger"]["launched"]
    else:
        raise ConfigError("need --launched or a grid sidecar JSON with the ledger")
    shape = tuple(int(v) for v in args.feature_shape.split("x"))
    est = inverse.infer(net, norm, grid, launched, feature_shape=shape)
    print(json.dumps(est, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_plot(args):
    grid = detection.read_polg(args.grid)
    image = detection.bscan_image(grid, args.channel)
    _check_outdir(args.out)
    meta = detection.write_pgm(image, args.out)
    meta["channel"] = args.channel
    meta["source"] = os.path.basename(args.grid)
    _write_json(args.out + ".json", meta)
    _log(f"wrote {meta['rows']}x{meta['cols']} {args.channel} image -> {args.out}")
    return EXIT_OK


def cmd_pipeline(args):
    outdir = args.outdir
    plan = [
        f"1. sweep {args.samples} samples of n_particle in [1.1, 1.5], "
        f"{args.photons} photons each -> {outdir}/sweep.pold",
        f"2. train {args.steps} steps (batch {args.batch}) -> {outdir}/model.poln",
        "3. evaluate held-out mean absolute error",
    ]
    if args.dry_run:
        for line in plan:
            print(line)
        return EXIT_OK
    os.makedirs(outdir, exist_ok=True)
    base = _pipeline_config(args)
    _log(plan[0])
    data, report = ds_mod.sweep(base, {"n_particle": (1.1, 1.5)},
                                args.samples, args.seed or 0,
                                feature_shape=(8, 8))
    if report["failed"]:
        _log(f"warning: {report['failed']} sweep samples failed")
    pold = os.path.join(outdir, "sweep.pold")
    ds_mod.write_pold(data, pold)

    _log(plan[1])
    train_ds, test_ds = ds_mod.split(data, 0.7, args.seed or 0)
    train_norm, norm = ds_mod.normalize_features(train_ds)
    test_norm = ds_mod.apply_normalization(test_ds, norm)
    net = inverse.Network(data.feature_len, data.target_len, width=48,
                          n_blocks=2, latent=12, seed=args.seed or 0,
                          target_names=data.target_names)
    result = inverse.train(net, train_norm, test_norm, steps=args.steps,
                           batch_size=args.batch, seed=args.seed or 0)
    net.set_params_vector(result.best_params)
    inverse.write_poln(net, norm, os.path.join(outdir, "model.poln"))
    lines = ["step,train_loss,val_loss"]
    val = dict(result.val_curve)
    for step, loss in result.train_curve:
        v = val.get(step, "")
        lines.append(f"{step},{loss:.12g},{v if v == '' else f'{v:.12g}'}")
    _write_atomic_text(os.path.join(outdir, "loss_curves.csv"),
                       "\n".join(lines) + "\n")

    _log(plan[2])
    x_te = test_norm.feature_matrix()
    y_te = test_norm.target_matrix()
    pred = net.forward(x_te)
    mae = float(np.mean(np.abs(pred - y_te)))
    print(json.dumps({"held_out_mae": mae,
                      "initial_val_loss": result.val_curve[0][1],
                      "final_val_loss": result.val_curve[-1][1],
                      "n_train": len(train_ds), "n_test": len(test_ds)},
                     indent=2))
    return EXIT_OK


def _pipeline_config(args) -> SimConfig:
    from .transport import MediumSpec

    if args.config:
        return _load_config(args)
    medium = MediumSpec(particle_radius=0.07, n_particle=1.3, n_host=1.0,
                        number_density=6.9, thickness=600.0, mu_a=1e-5)
    det = engine.DetectorConfig(n_radius=32, n_depth=32, dr=16.0, dz=16.0)
    vr = engine.VarianceReduction(partial_photon=True)
    return SimConfig(medium=medium, wavelength=0.632, n_photons=args.photons,
                     seed=args.seed or 0, detector=det, variance_reduction=vr)


def build_parser() -> _Parser:
    p = _Parser(prog="polmc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON simulation config")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("simulate", help="run a simulation, write grid + ledger")
    common(sp)
    sp.add_argument("--photons", type=int, default=None)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("mietable", help="dump the scattering table as CSV")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_mietable)

    sp = sub.add_parser("validate", help="reflectance vs effective-medium theory")
    common(sp)
    sp.add_argument("--photons", type=int, default=None)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--angles", default="0",
                    help="comma-separated incidence angles in degrees")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("dataset", help="sweep properties into a labeled dataset")
    common(sp)
    sp.add_argument("--photons", type=int, default=None)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--ranges", default=None,
                    help="e.g. n_particle=1.1:1.5,mu_a=0:0.001")
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--feature-shape", default="16x16")
    sp.add_argument("--csv", default=None, help="also export rows as CSV")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_dataset)

    sp = sub.add_parser("train", help="train the inverse network on a dataset")
    common(sp, config=False)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--steps", type=int, default=3000)
    sp.add_argument("--epochs", type=int, default=None,
                    help="overrides --steps: one epoch = ceil(N/batch) steps")
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--blocks", type=int, default=3)
    sp.add_argument("--latent", type=int, default=16)
    sp.add_argument("--curves", default=None, help="loss-curve CSV path")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="estimate properties from a grid")
    common(sp, config=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--grid", required=True)
    sp.add_argument("--meta", default=None)
    sp.add_argument("--launched", type=float, default=None)
    sp.add_argument("--feature-shape", default="16x16")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("plot", help="emit a B-scan graymap from a grid")
    common(sp, config=False)
    sp.add_argument("--grid", required=True)
    sp.add_argument("--channel", default="p_xx",
                    choices=list(detection.CHANNEL_NAMES)
                    + ["p_xy_doc", "p_pm_doc", "doc", "sum_w"])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("pipeline", help="end-to-end: sweep -> train -> infer")
    common(sp)
    sp.add_argument("--photons", type=int, default=20000)
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--steps", type=int, default=3000)
    sp.add_argument("--batch", type=int, default=16)
    sp.add_argument("--outdir", default="pipeline_out")
    sp.add_argument("--dry-run", action="store_true")
    sp.set_defaults(func=cmd_pipeline)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, MieError, ds_mod.DatasetError,
            detection.GridFormatError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TransportError, inverse.TrainingDiverged, OSError,
            RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
