import json

import numpy as np
import pytest

from xrayocc.config import config_from_dict, make_setup
from xrayocc.dataset import DatasetError, DatasetMismatchError, generate_dataset, load_split
from xrayocc.training import render_case

from conftest import tiny_config_dict


@pytest.fixture(scope="module")
def rendered(tmp_path_factory):
    cfg = config_from_dict(tiny_config_dict())
    root = tmp_path_factory.mktemp("data")
    generate_dataset(cfg, root)
    return cfg, root


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_manifest_lists_every_file(rendered):
    cfg, root = rendered
    manifest = json.loads((root / "manifest.json").read_text())
    listed = {f for row in manifest["phantoms"] for f in row["files"]}
    on_disk = set(snapshot(root)) - {"manifest.json"}
    assert listed == on_disk
    assert len(manifest["phantoms"]) == 4


def test_k_slab_files_per_view(rendered):
    cfg, root = rendered
    for row in json.loads((root / "manifest.json").read_text())["phantoms"]:
        for view in range(2):
            slabs = [f for f in row["files"] if f"view{view}_slab" in f and f.endswith(".raw")]
            assert len(slabs) == cfg.model.K


def test_rerun_is_byte_identical(rendered, tmp_path):
    cfg, root = rendered
    generate_dataset(cfg, tmp_path)
    assert snapshot(tmp_path) == snapshot(root)
    generate_dataset(cfg, tmp_path)  # cached path
    assert snapshot(tmp_path) == snapshot(root)


def test_loaded_case_matches_direct_render(rendered):
    cfg, root = rendered
    case = load_split(cfg, root, "test")[0]
    direct = render_case(case.seed, make_setup(cfg), dims=cfg.data.volume_dims)
    np.testing.assert_allclose(case.originals, direct.originals, atol=1e-6)
    np.testing.assert_allclose(case.augmented, direct.augmented, atol=1e-6)


def test_split_sizes(rendered):
    cfg, root = rendered
    assert [len(load_split(cfg, root, s)) for s in ("train", "val", "test")] == [2, 1, 1]


def test_missing_dataset(tmp_path):
    with pytest.raises(DatasetError, match="gen-data"):
        load_split(config_from_dict(tiny_config_dict()), tmp_path, "train")


def test_mismatched_config_and_unknown_split(rendered):
    cfg, root = rendered
    with pytest.raises(DatasetMismatchError, match="render hash"):
        load_split(config_from_dict(tiny_config_dict(model={"K": 3})), root, "train")
    with pytest.raises(DatasetMismatchError, match="unknown split"):
        load_split(cfg, root, "holdout")
