import numpy as np
import pytest

from cmm.config import CmmConfig


def tiny_config(**kw) -> CmmConfig:
    base = dict(D=8, S=4, vocab_in=5, vocab_out=5, N_H=2, N_L=2, N_super=4, batch_size=4, dtype="float64")
    base.update(kw)
    return CmmConfig.from_dict(base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
