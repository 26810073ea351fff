import json

import pytest

from xrayocc.config import RunConfig


def tiny_config_dict(**overrides) -> dict:
    """A few-second configuration: 16x16 detectors, C=4, two epochs."""
    cfg = RunConfig().to_dict()
    cfg["geometry"].update(detector=[16, 16], spacing=[10.0, 10.0])
    cfg["data"].update(n_train=2, n_val=1, n_test=1, n_points=256, volume_dims=24)
    cfg["model"].update(channels=4, K=2, mlp_hidden=[16, 16])
    cfg["train"].update(epochs=2)
    cfg["eval"].update(resolution=12, n_points=64, runs=2, gt_resolution=24)
    for block, values in overrides.items():
        cfg[block].update(values)
    return cfg


@pytest.fixture
def tiny_config(tmp_path):
    cfg = tiny_config_dict()
    cfg["paths"] = {"data_dir": str(tmp_path / "data"), "runs_dir": str(tmp_path / "runs")}
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(cfg))
    return path
