"""``xrayocc`` command line: gen-data, train, reconstruct, evaluate, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from .autodiff import OPS
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_from_dict, load_config, make_setup
from .dataset import DatasetError, DatasetMismatchError, generate_dataset, load_split
from .drr import DRRImage, load_volume, march, slab_edges
from .evaluation import evaluate_reconstruction, strip_timing
from .gradcheck import mutated_backward
from .gradcheck_suite import run_suite
from .mesh import OccupancyGrid, marching_cubes, write_obj
from .network import StudentModel, TeacherModel, infer_occupancy_grid
from .phantom import LABELS, generate_phantom
from .training import FitSettings, case_from_images, train_student, train_teacher

log = logging.getLogger("xrayocc")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
TRACE_FIELDS = ("step", "epoch", "recon", "distill", "total", "val_recon")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_trace(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(float(row[k])) if k not in ("step", "epoch") else row[k] for k in TRACE_FIELDS})


def _checkpoint_config(manifest: dict) -> RunConfig:
    return config_from_dict(manifest["config"])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    root = generate_dataset(cfg, args.out or cfg.paths.data_dir)
    print(f"dataset written to {root}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.alpha is not None:
        cfg.model.alpha = args.alpha
    cfg.validate()
    data_dir = args.data or cfg.paths.data_dir
    setup = make_setup(cfg)
    teacher = None
    if args.role == "student" and cfg.model.alpha > 0:
        if not args.teacher:
            raise ConfigError("student training with alpha > 0 needs --teacher PATH")
        teacher, _ = load_checkpoint(args.teacher)
        if not isinstance(teacher, TeacherModel):
            raise ConfigError(f"{args.teacher} is not a teacher checkpoint")
        if teacher.K != setup.K or teacher.channels != cfg.model.channels:
            raise ConfigError(
                f"teacher (K={teacher.K}, C={teacher.channels}) does not match model.K={setup.K}, model.channels={cfg.model.channels}"
            )
    elif args.role == "student" and args.teacher:
        log.warning("alpha = 0: ignoring --teacher, training the baseline student")

    train = load_split(cfg, data_dir, "train")
    val = load_split(cfg, data_dir, "val")
    fit = FitSettings(cfg.train.epochs, cfg.train.lr, cfg.data.n_points, cfg.train.seed, cfg.model.alpha, warmup_epochs=cfg.train.warmup_epochs)
    hidden = tuple(cfg.model.mlp_hidden)
    if args.role == "teacher":
        model, trace = train_teacher(setup, train, val, fit, cfg.model.channels, hidden)
    else:
        model, trace = train_student(setup, train, val, fit, teacher, cfg.model.channels, tuple(cfg.model.distill_layers), hidden)
    out = Path(args.out or Path(cfg.paths.runs_dir) / f"{args.role}_seed{cfg.train.seed}")
    metrics = {"best_val_recon": min(r["val_recon"] for r in trace), "final_train_recon": trace[-1]["recon"]}
    save_checkpoint(out, model, cfg.to_dict(), trace[-1]["step"], metrics)
    _write_trace(out / "trace.csv", trace)
    print(f"{args.role} checkpoint written to {out} (best val recon {metrics['best_val_recon']:.5f})")
    return EXIT_OK


def _images_for(model, cfg: RunConfig, args):
    setup = make_setup(cfg, K=model.K)
    if args.volume:
        vol = load_volume(args.volume)
        seed = None
    else:
        seed = cfg.data.base_seed if args.seed is None else args.seed
        _, vol = generate_phantom(seed, cfg.data.volume_dims, setup.space)
    originals, augmented = [], []
    for i, (geom, slabs) in enumerate(zip(setup.geoms, setup.slabs)):
        stack = march(vol, geom, slab_edges(slabs), cfg.data.step)
        originals.append(DRRImage(stack.sum(axis=0), view=i))
        augmented.append([DRRImage(s, view=i) for s in stack])
    case = case_from_images(seed if seed is not None else -1, None, originals, augmented)
    images = case.originals if isinstance(model, StudentModel) else case.augmented
    return setup, images


def _mesh_paths(out: Path) -> list[Path]:
    if out.suffix == ".obj":
        return [out.with_name(f"{out.stem}_{label}.obj") for label in LABELS]
    return [out / f"{label}.obj" for label in LABELS]


def cmd_reconstruct(cfg: RunConfig | None, args) -> int:
    model, manifest = load_checkpoint(args.checkpoint)
    cfg = cfg or _checkpoint_config(manifest)
    R = args.resolution or cfg.eval.resolution
    if R < 8:
        raise ConfigError(f"--resolution must be >= 8, got {R}")
    setup, images = _images_for(model, cfg, args)
    grid = infer_occupancy_grid(model, setup, images, R, cfg.eval.chunk)
    paths = _mesh_paths(Path(args.out))
    for ch, (label, path) in enumerate(zip(LABELS, paths)):
        mesh = marching_cubes(OccupancyGrid(grid[..., ch], setup.space))
        path.parent.mkdir(parents=True, exist_ok=True)
        write_obj(mesh, path)
        if mesh.is_empty:
            print(f"warning: {label} field never crosses 0.5; wrote empty mesh {path}", file=sys.stderr)
        else:
            print(f"{label}: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {path}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig | None, args) -> int:
    model, manifest = load_checkpoint(args.checkpoint)
    cfg = cfg or _checkpoint_config(manifest)
    R = args.resolution or cfg.eval.resolution
    if R < 8:
        raise ConfigError(f"--resolution must be >= 8, got {R}")
    cases = load_split(cfg, args.data or cfg.paths.data_dir, args.split)
    setup = make_setup(cfg, K=model.K)
    report = evaluate_reconstruction(
        model, setup, cases, R, cfg.eval.n_points, cfg.eval.runs, cfg.eval.gt_resolution, cfg.eval.chunk,
        seed=0 if args.seed is None else args.seed,
    )
    report["split"] = args.split
    report["role"] = manifest["role"]
    if args.no_timing:
        report = strip_timing(report)
    _write_json(Path(args.out), report)
    for label, s in report["summary"].items():
        cd = "n/a" if s["cd_mean"] is None else f"{s['cd_mean']:.3f} +- {s['cd_std']:.3f}"
        emd = "n/a" if s["emd_mean"] is None else f"{s['emd_mean']:.3f} +- {s['emd_std']:.3f}"
        print(f"{label:>5s}: CD {cd} mm  EMD {emd} mm  failures {s['failures']}/{s['n']}")
    return EXIT_OK


def cmd_gradcheck(cfg, args) -> int:
    if args.mutate and args.mutate not in OPS:
        raise ConfigError(f"--mutate: unknown op '{args.mutate}', expected one of {', '.join(sorted(OPS))}")
    t0 = time.perf_counter()
    if args.mutate:
        with mutated_backward(args.mutate):
            results = run_suite(seed=args.seed or 0)
    else:
        results = run_suite(seed=args.seed or 0)
    ok = True
    for name, report in results:
        ok &= report.passed
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} {name:<22s} max rel err {report.max_rel_error:.3e} (tol {report.tolerance:.0e})")
    print(f"{'all checks passed' if ok else 'gradient check FAILED'} in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="JSON run config (defaults if omitted)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="xrayocc", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--print-config", action="store_true", help="print the effective config as JSON and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="render the phantom dataset")
    p.add_argument("--out", metavar="DIR", help="dataset directory (default: paths.data_dir)")
    p.set_defaults(func=cmd_gen_data, uses_checkpoint_config=False)

    p = sub.add_parser("train", parents=[common], help="train a teacher or student")
    p.add_argument("--role", choices=("teacher", "student"), required=True)
    p.add_argument("--teacher", metavar="PATH", help="teacher checkpoint (student with alpha > 0)")
    p.add_argument("--alpha", type=float, help="distillation weight override; 0 trains the no-division baseline")
    p.add_argument("--seed", type=int, help="training seed override")
    p.add_argument("--data", metavar="DIR", help="dataset directory (default: paths.data_dir)")
    p.add_argument("--out", metavar="DIR", help="checkpoint directory")
    p.set_defaults(func=cmd_train, uses_checkpoint_config=False)

    p = sub.add_parser("reconstruct", parents=[common], help="extract per-channel OBJ meshes")
    p.add_argument("checkpoint")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--seed", type=int, help="phantom seed to render (default: data.base_seed)")
    src.add_argument("--volume", metavar="STEM", help="volume stem (<STEM>.raw + <STEM>.json)")
    p.add_argument("--resolution", type=int, help="grid resolution R (default: eval.resolution)")
    p.add_argument("--out", required=True, help="out.obj (-> out_left.obj, out_right.obj) or a directory")
    p.set_defaults(func=cmd_reconstruct, uses_checkpoint_config=True)

    p = sub.add_parser("evaluate", parents=[common], help="CD / EMD report on a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--resolution", type=int, help="grid resolution R (default: eval.resolution)")
    p.add_argument("--seed", type=int, help="surface-sampling seed (default 0)")
    p.add_argument("--data", metavar="DIR", help="dataset directory (default: paths.data_dir)")
    p.add_argument("--no-timing", action="store_true", help="null wall-clock fields so reports compare byte for byte")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_evaluate, uses_checkpoint_config=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and loss")
    p.add_argument("--seed", type=int, help="seed for the randomized shapes (default 0)")
    p.add_argument("--mutate", metavar="OP", help="negative control: corrupt the backward rule of OP")
    p.set_defaults(func=cmd_gradcheck, uses_checkpoint_config=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config_path = getattr(args, "config", None)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.print_config:
            print(load_config(config_path).to_json(), end="")
            return EXIT_OK
        if args.command is None:
            parser.print_help()
            return EXIT_CONFIG
        if args.uses_checkpoint_config:
            cfg = load_config(config_path) if config_path else None
        else:
            cfg = load_config(config_path)
        return args.func(cfg, args)
    except (ConfigError, DatasetMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, DatasetError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
