import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seed_global_rngs():
    # tests that draw from the global generators stay reproducible run to run
    torch.manual_seed(0)
    np.random.seed(0)
