import json
import os
import shutil
import time

import numpy as np
import pytest
from hypothesis import settings

from closerange.cli import main
from closerange.synthetic import write_cube_dataset

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def write_config(path, dataset, output, **extra):
    import yaml

    cfg = {"dataset": str(dataset), "output": str(output), "focal_px": 700.0, "seed": 0, "threads": 1}
    cfg.update(extra)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh)
    return path


@pytest.fixture(scope="session")
def cube_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cube_data")
    t0 = time.perf_counter()
    truth = write_cube_dataset(root)
    return {"root": root, "truth": truth, "render_seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def cube_run(cube_dataset, tmp_path_factory):
    """One full ``closerange all`` run over the rendered cube, shared by the pipeline tests."""
    work = tmp_path_factory.mktemp("cube_run")
    out = work / "out"
    cfg = write_config(work / "run.yaml", cube_dataset["root"], out)
    t0 = time.perf_counter()
    code = main(["all", "--config", str(cfg)])
    return {"out": out, "config": cfg, "exit_code": code, "seconds": time.perf_counter() - t0,
            "truth": cube_dataset["truth"], "dataset": cube_dataset["root"]}


@pytest.fixture
def cube_copy(cube_run, tmp_path):
    """A private copy of the finished cube run, so tests can rerun against a warm cache."""
    out = tmp_path / "out"
    shutil.copytree(cube_run["out"], out)
    cfg = write_config(tmp_path / "run.yaml", cube_run["dataset"], out)
    return {"out": out, "config": cfg, "dataset": cube_run["dataset"]}


def read_json(path):
    with open(os.fspath(path)) as fh:
        return json.load(fh)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
