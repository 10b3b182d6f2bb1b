import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dispfield import precision

_INITIAL_THREADS = torch.get_num_threads()


@pytest.fixture(autouse=True)
def _reset_global_state():
    """Every test starts in float32, non-deterministic, default threads."""
    precision.set_precision("float32")
    precision._state["deterministic"] = False
    torch.set_num_threads(_INITIAL_THREADS)
    yield
    precision.set_precision("float32")
    precision._state["deterministic"] = False
    torch.set_num_threads(_INITIAL_THREADS)
