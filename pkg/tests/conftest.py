import numpy as np
import pytest

from bcqtune import toymodel as tm
from bcqtune.bcq import QuantConfig
from bcqtune.qlinear import QuantLinear
from bcqtune import bcq


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_layer(rng, h_out, h_in, q, g=0, method="greedy"):
    w = rng.standard_normal((h_out, h_in))
    cfg = QuantConfig(q=q, g=g, method=method)
    return QuantLinear(bcq.quantize(w, cfg), rng.standard_normal(h_out))


@pytest.fixture
def tiny_model():
    cfg = tm.ModelConfig(vocab=11, h=8, n_layers=2, n_ctx=8)
    return tm.quantize_model(tm.init_dense(cfg, seed=5), QuantConfig(q=3, g=4))
