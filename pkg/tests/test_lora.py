import numpy as np
import pytest

from graphmoe import autograd as ag
from graphmoe.autograd import Tensor
from graphmoe.errors import ConfigError, ShapeError
from graphmoe.lora import FrozenBase, LoRAAdapter, expert_delta, lora_forward
from helpers import check_gradients


def make(rng, i=6, o=5, r=2, alpha=4.0):
    base = FrozenBase(rng.normal(size=(o, i)))
    adapter = LoRAAdapter(i, o, r, alpha, rng=rng)
    return base, adapter


def test_fresh_adapter_is_identity_on_the_base():
    rng = np.random.default_rng(0)
    base, adapter = make(rng)
    x = Tensor(rng.normal(size=(3, 6)))
    assert np.array_equal(lora_forward(adapter, base, x).data, base(x).data)


def test_update_matches_scaled_low_rank_product():
    rng = np.random.default_rng(1)
    base, adapter = make(rng, r=3, alpha=4.0)
    adapter.B.data = rng.normal(size=adapter.B.shape)
    x = rng.normal(size=(4, 6))
    expected = x @ (base.weight.data + (4.0 / 3) * adapter.B.data @ adapter.A.data).T
    np.testing.assert_allclose(lora_forward(adapter, base, Tensor(x)).data, expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(adapter.delta_weight(), (4.0 / 3) * adapter.B.data @ adapter.A.data)


def test_a_init_bound_and_b_zero():
    rng = np.random.default_rng(2)
    adapter = LoRAAdapter(16, 8, 4, rng=rng)
    assert np.abs(adapter.A.data).max() <= 1 / 4
    assert not adapter.B.data.any()
    assert adapter.scale == 1.0


def test_gradients_reach_only_adapter():
    rng = np.random.default_rng(3)
    base, adapter = make(rng)
    adapter.B.data = rng.normal(size=adapter.B.shape)
    x = Tensor(rng.normal(size=(4, 6)))
    w = Tensor(rng.normal(size=(4, 5)))
    check_gradients(lambda: ag.sum_(ag.mul(lora_forward(adapter, base, x), w)), adapter.parameters(), n=20, rng=rng)
    assert base.weight.grad is None


@pytest.mark.parametrize("rank", [0, 6, -1])
def test_rank_out_of_range(rank):
    with pytest.raises(ConfigError):
        LoRAAdapter(6, 5, rank)


def test_alpha_must_be_positive():
    with pytest.raises(ConfigError):
        LoRAAdapter(6, 5, 2, alpha=0.0)


def test_width_mismatch():
    rng = np.random.default_rng(4)
    base, adapter = make(rng)
    with pytest.raises(ShapeError):
        expert_delta(adapter, Tensor(np.ones((2, 7))))
    with pytest.raises(ShapeError):
        lora_forward(LoRAAdapter(5, 5, 1), base, Tensor(np.ones((2, 6))))
