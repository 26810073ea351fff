"""On-disk dataset: phantom specs, voxel volumes and pre-rendered (unnormalised) DRRs.

Layout under the data directory::

    manifest.json                 {format_version, render_hash, phantoms: [{seed, split, files}]}
    phantom_00007/spec.json
    phantom_00007/volume.{raw,json}
    phantom_00007/view0.{raw,json}          original render, view 0
    phantom_00007/view0_slab2.{raw,json}    slab 2 of view 0
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

from .config import RunConfig, make_setup, render_hash
from .drr import DRRImage, load_image, march, save_image, save_volume, slab_edges
from .network import Setup
from .phantom import PhantomSpec, generate_phantom, make_dataset
from .training import PhantomCase, case_from_images

log = logging.getLogger(__name__)

DATASET_VERSION = 1
SPLITS = ("train", "val", "test")


class DatasetError(RuntimeError):
    """Dataset missing or unreadable."""


class DatasetMismatchError(ValueError):
    """Dataset on disk was rendered under a different configuration, or lacks a split."""


def phantom_dir(root: Path, seed: int) -> Path:
    return root / f"phantom_{seed:05d}"


def _phantom_files(setup: Setup, seed: int) -> list[str]:
    d = f"phantom_{seed:05d}"
    files = [f"{d}/spec.json", f"{d}/volume.raw", f"{d}/volume.json"]
    for i in range(setup.M):
        stems = [f"view{i}"] + [f"view{i}_slab{k}" for k in range(setup.K)]
        files += [f"{d}/{s}{ext}" for s in stems for ext in (".raw", ".json")]
    return files


def _write_phantom(root: Path, seed: int, setup: Setup, dims: int, step: float | None) -> None:
    d = phantom_dir(root, seed)
    d.mkdir(parents=True, exist_ok=True)
    spec, vol = generate_phantom(seed, dims, setup.space)
    (d / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    save_volume(vol, d / "volume")
    for i, (geom, slabs) in enumerate(zip(setup.geoms, setup.slabs)):
        stack = march(vol, geom, slab_edges(slabs), step)
        save_image(DRRImage(stack.sum(axis=0), view=i), d / f"view{i}")
        for k, img in enumerate(stack):
            save_image(DRRImage(img, view=i), d / f"view{i}_slab{k}")


def _read_manifest(root: Path) -> dict | None:
    try:
        return json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        return None


def generate_dataset(cfg: RunConfig, out_dir: str | Path) -> Path:
    """Render every phantom of every split; phantoms already rendered under the same
    render hash are kept.  Output bytes depend only on the config."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    setup = make_setup(cfg)
    key = render_hash(cfg)
    old = _read_manifest(root)
    cached = old is not None and old.get("render_hash") == key
    seeds = make_dataset(cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, cfg.data.base_seed)
    rows = []
    for split in SPLITS:
        for seed in seeds[split]:
            files = _phantom_files(setup, seed)
            if cached and all((root / f).is_file() for f in files):
                log.info("phantom %d cached", seed)
            else:
                log.info("rendering phantom %d (%s)", seed, split)
                _write_phantom(root, seed, setup, cfg.data.volume_dims, cfg.data.step)
            rows.append({"seed": seed, "split": split, "files": files})
    manifest = {"format_version": DATASET_VERSION, "render_hash": key, "K": setup.K, "phantoms": rows}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_case(root: Path, seed: int, setup: Setup) -> PhantomCase:
    d = phantom_dir(root, seed)
    try:
        spec = PhantomSpec.from_dict(json.loads((d / "spec.json").read_text()))
        originals = [load_image(d / f"view{i}") for i in range(setup.M)]
        augmented = [[load_image(d / f"view{i}_slab{k}") for k in range(setup.K)] for i in range(setup.M)]
    except FileNotFoundError as exc:
        raise DatasetError(f"missing dataset file {exc.filename}") from None
    return case_from_images(seed, spec, originals, augmented)


def load_split(cfg: RunConfig, data_dir: str | Path, split: str) -> list[PhantomCase]:
    root = Path(data_dir)
    manifest = _read_manifest(root)
    if manifest is None:
        raise DatasetError(f"{root / 'manifest.json'} not found; run gen-data first")
    if manifest.get("render_hash") != render_hash(cfg):
        raise DatasetMismatchError(
            f"{root} was rendered under render hash {manifest.get('render_hash')}, config expects {render_hash(cfg)}"
        )
    if split not in SPLITS:
        raise DatasetMismatchError(f"unknown split '{split}', expected one of {', '.join(SPLITS)}")
    seeds = [row["seed"] for row in manifest["phantoms"] if row["split"] == split]
    if not seeds:
        raise DatasetMismatchError(f"split '{split}' has no phantoms in {root}")
    setup = make_setup(cfg)
    return [load_case(root, s, setup) for s in seeds]
