import warnings

import pytest
import torch

from ltmvo.data import default_synth_config, synth_generate


@pytest.fixture(scope="session")
def synth_seq():
    """A short synthetic sequence with exact depth and pose ground truth."""
    return synth_generate(default_synth_config(frames=25, seed=3))


@pytest.fixture(scope="session")
def long_synth_seq():
    return synth_generate(default_synth_config(frames=97, seed=11))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        yield
