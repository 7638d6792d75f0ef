import time

import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def protocol_root(tmp_path_factory):
    """Desk-scale protocol data: 32 training tiles and 16 held-out tiles per test map, 128 px."""
    from vdn.noise_sim import build_protocol_data

    return build_protocol_data(tmp_path_factory.mktemp("protocol"), seed=0, tile=128)


@pytest.fixture(scope="session")
def desk_run(protocol_root, tmp_path_factory):
    """The reduced VDN trained with the desk preset (30 epochs, 64 px patches)."""
    from vdn.noise_sim import read_dataset
    from vdn.pipeline import TrainConfig, train

    cfg = TrainConfig.desk()
    out = tmp_path_factory.mktemp("desk_run")
    t0 = time.perf_counter()
    res = train(read_dataset(protocol_root / "train"), cfg, out_dir=out)
    return {"result": res, "cfg": cfg, "seconds": time.perf_counter() - t0, "out": out}
