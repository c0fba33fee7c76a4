import pytest
import torch

from tscondense.model import TsfeConfig


@pytest.fixture
def tiny_cfg():
    """The smallest configuration used for gradient checks."""
    return TsfeConfig(
        lookback=8, horizon=4, channels=2, patch_len=4, patch_stride=2, num_operators=1, num_heads=2, model_dim=8
    )


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
