import os

import pytest

from rainsr.config import parse_config
from rainsr.datasets import MicroSizes, make_micro_dataset

TINY_CFG_TEMPLATE = """
profile = desk
seed = {seed}
run_dir = {run_dir}
[data]
root = {root}
scene_size = 32
sunny = 6
rainy = 6
real_lr = 6
eval = 2
[translator]
iters = {t_iters}
batch_size = 2
patch_size = 32
base_channels = 8
residual_blocks = 1
disc_channels = 8
[dsn]
iters = {d_iters}
batch_size = 2
patch_size = 32
base_channels = 8
disc_channels = 8
[srn]
iters = {s_iters}
batch_size = 2
patch_size = 32
base_channels = 8
residual_blocks = 1
disc_channels = 8
"""


@pytest.fixture(scope="session")
def tiny_dataset_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinydata")
    make_micro_dataset(str(root), base_seed=0,
                       sizes=MicroSizes(6, 6, 6, 2), scene_size=32)
    return str(root)


@pytest.fixture
def tiny_config(tiny_dataset_root, tmp_path):
    def make(run_dir=None, seed=0, t_iters=4, d_iters=3, s_iters=3):
        rd = run_dir or str(tmp_path / "run")
        return parse_config(TINY_CFG_TEMPLATE.format(
            seed=seed, run_dir=rd, root=tiny_dataset_root,
            t_iters=t_iters, d_iters=d_iters, s_iters=s_iters))
    return make
