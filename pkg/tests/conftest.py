import sys
import os

import pytest

# Ensure the package in src/ is discoverable for tests
ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
SRC = os.path.join(ROOT, 'src')
if SRC not in sys.path:
    sys.path.insert(0, SRC)
TESTS = os.path.dirname(os.path.abspath(__file__))
if TESTS not in sys.path:
    sys.path.insert(0, TESTS)

from xmodal import synthdata  # noqa: E402
from xmodal.cma import CmaConfig  # noqa: E402
from xmodal.trainer import TrainConfig  # noqa: E402

SMALL_SPEC = synthdata.DatasetSpec(
    num_classes=4, instances_per_class=8, dim_a=6, dim_b=5,
    confound_pairs_a=((0, 1),), confound_pairs_b=((2, 3),), seed=3,
)


@pytest.fixture
def small_dataset():
    """32 instances, 4 classes; cheap enough for multi-epoch training in tests."""
    return synthdata.generate(SMALL_SPEC)


@pytest.fixture
def small_config():
    return TrainConfig(
        variant='cross', epochs=3, batch_size=8, lr=1e-2, num_negatives=6, seed=11,
        hidden_dims=(12,), head_dims=(10, 8), cma_init_epoch=2,
    )


@pytest.fixture
def small_cma_config(small_config):
    from dataclasses import replace
    return replace(small_config, cma=CmaConfig(k_pool=4, k_p=2, k_n=6, lam=1.0, refresh_period=2, epochs=3))
