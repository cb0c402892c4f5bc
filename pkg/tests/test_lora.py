from __future__ import annotations

import numpy as np
import pytest

from samed import tensor as T
from samed.data import SynthConfig, generate
from samed.lora import LoraLinear, LoraSpec, lora_layers, merge, wrap_attention
from samed.model import SamedModel, count_parameters, customize
from samed.nn import AttentionBlock, Linear, Parameter
from samed.tensor import GradTape, Tensor
from samed.train import TrainConfig, train
from helpers import autodiff_grads, batch, micro_config


def _scalar_layer() -> LoraLinear:
    lin = Linear(1, 1, np.random.default_rng(0), bias=False)
    lin.weight.data = np.array([[2.0]])
    layer = LoraLinear.__new__(LoraLinear)
    layer.weight, layer.bias = lin.weight, None
    layer.lora_A = Parameter(np.array([[3.0]]))
    layer.lora_B = Parameter(np.array([[4.0]]))
    return layer


def test_scalar_bypass_example():
    layer = _scalar_layer()
    assert layer(Tensor(np.array([[5.0]]))).data.item() == 70.0
    assert merge(layer).tolist() == [[14.0]]


def test_zero_b_is_bit_exact_base():
    rng = np.random.default_rng(1)
    lin = Linear(8, 6, rng)
    lin.bias.data = rng.standard_normal(6)
    x = Tensor(rng.standard_normal((5, 8)))
    want = lin(x).data
    layer = LoraLinear(lin, 2, rng)
    assert not layer.lora_B.data.any()
    assert np.array_equal(layer(x).data, want)
    assert np.array_equal(merge(layer), lin.weight.data)


def test_init_statistics():
    lin = Linear(64, 64, np.random.default_rng(2))
    layer = LoraLinear(lin, 16, np.random.default_rng(3))
    # A ~ N(0, 1/r)
    assert abs(layer.lora_A.data.std() - 0.25) < 0.02
    assert layer.weight is lin.weight and not layer.weight.requires_grad


def test_bypass_equals_merged_weight():
    rng = np.random.default_rng(4)
    lin = Linear(10, 7, rng)
    layer = LoraLinear(lin, 3, rng)
    layer.lora_B.data = rng.standard_normal(layer.lora_B.shape)
    x = Tensor(rng.standard_normal((100, 10)))
    merged = layer.merged_linear()
    assert np.max(np.abs(layer(x).data - merged(x).data)) <= 1e-12
    dense = x.data @ (lin.weight.data + layer.lora_B.data @ layer.lora_A.data).T + lin.bias.data
    assert np.max(np.abs(layer(x).data - dense)) <= 1e-12


def test_rank_limit():
    lin = Linear(8, 8, np.random.default_rng(0))
    LoraLinear(lin, 4, np.random.default_rng(0))
    with pytest.raises(ValueError, match="too large"):
        LoraLinear(lin, 5, np.random.default_rng(0))


def test_spec_validation_and_normalisation():
    assert LoraSpec(targets=["V", "q"]).targets == ["q", "v"]
    with pytest.raises(ValueError):
        LoraSpec(targets=["x"])
    with pytest.raises(ValueError):
        LoraSpec(targets=[])
    with pytest.raises(ValueError):
        LoraSpec(rank=0)
    with pytest.raises(ValueError):
        LoraSpec(scope="everything")


def test_double_wrap_rejected():
    blk = AttentionBlock(8, 2, np.random.default_rng(0))
    assert wrap_attention(blk, ["q"], 2, np.random.default_rng(0)) == 2 * 8 + 8 * 2
    with pytest.raises(RuntimeError):
        wrap_attention(blk, ["q"], 2, np.random.default_rng(0))


def test_injection_count_on_depth_two_encoder():
    cfg = micro_config(embed_dim=16, depth=2)
    base = SamedModel(cfg)
    view = customize(base, LoraSpec(rank=4, targets=["q", "v"]), seed=0)
    enc = {n: m for n, m in lora_layers(view).items() if n.startswith("encoder.")}
    assert len(enc) == 4
    added = sum(m.lora_A.size + m.lora_B.size for m in enc.values())
    assert added == 2 * 2 * (4 * 16 + 16 * 4)


def test_untargeted_projections_stay_plain_and_frozen():
    view = customize(SamedModel(micro_config()), LoraSpec(targets=["q"]), seed=0)
    for blk in view.encoder.blocks:
        assert isinstance(blk.attn.q, LoraLinear)
        for name in "kvo":
            proj = getattr(blk.attn, name)
            assert type(proj) is Linear and not proj.weight.requires_grad


def test_lora_grads_at_step_zero():
    cfg = micro_config()
    view = customize(SamedModel(cfg), LoraSpec(), seed=0)
    ds = generate(SynthConfig(n_train=4, n_test=1, image_size=16, radius_range=[2, 4], num_classes=3))
    x, y = batch(ds["train"][:2])
    grads = autodiff_grads(view, x, y)
    a = [g for n, g in grads.items() if n.endswith("lora_A")]
    b = [g for n, g in grads.items() if n.endswith("lora_B")]
    assert a and all(not g.any() for g in a)
    assert b and all(g.any() for g in b)


def test_base_untouched_by_view_training():
    cfg = micro_config()
    base = SamedModel(cfg)
    before = base.state_dict()
    view = customize(base, LoraSpec(), seed=0)
    ds = generate(SynthConfig(n_train=4, n_test=1, image_size=16, radius_range=[2, 4], num_classes=3))
    train(view, ds["train"], TrainConfig(batch_size=2, warmup_period=1, max_iterations=10,
                                         early_stop_iter=3))
    after = base.state_dict()
    assert before.keys() == after.keys()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert count_parameters(base)["trainable"] == 0


@pytest.mark.parametrize("targets", [["q"], ["q", "v"], ["q", "k", "v", "o"]])
def test_projection_sets_train(targets):
    cfg = micro_config()
    view = customize(SamedModel(cfg, dtype=np.float32), LoraSpec(targets=targets), seed=0)
    ds = generate(SynthConfig(n_train=4, n_test=1, image_size=16, radius_range=[2, 4], num_classes=3))
    state = train(view, ds["train"], TrainConfig(batch_size=2, warmup_period=1, max_iterations=10,
                                                 early_stop_iter=4))
    assert state.iteration == 4 and all(np.isfinite(r[-1]) for r in state.log)
    assert all(layer.lora_B.data.any() for layer in lora_layers(view).values())


def test_grad_flows_through_bypass_only_to_lora():
    rng = np.random.default_rng(5)
    lin = Linear(4, 3, rng)
    lin.freeze()
    layer = LoraLinear(lin, 1, rng)
    layer.lora_B.data = rng.standard_normal((3, 1))
    with GradTape() as tape:
        loss = T.sum(layer(Tensor(rng.standard_normal((2, 4)))))
    tape.backward(loss)
    assert lin.weight.grad is None and layer.lora_A.grad is not None
