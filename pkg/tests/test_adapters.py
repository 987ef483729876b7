"""Module attach/detach mechanics and the zero-effect-when-untrained contract."""

import numpy as np
import pytest

from srat.adapters import (
    AdapterEncoder,
    BgModule,
    ControlBranch,
    LoraModule,
    attach,
    control_forward,
    default_lora_targets,
    detach,
    encode_reference,
    lora_apply,
)
from srat.generator import (
    ADAPTER_DIM,
    IMG_DIM,
    SamplerConfig,
    VelocityModel,
    sample_batch,
    to_flow,
)
from srat.params import ParamStore, ParamStoreError
from srat.tensor import ShapeError, Tensor
from srat.world import CaptionTokens


def fresh_model(seed=0):
    store = ParamStore()
    return VelocityModel(store, hidden=32, blocks=2, init_seed=seed)


def gen(model, seed=0, **kwargs):
    caps = [CaptionTokens(3, 1), CaptionTokens()]
    cfg = SamplerConfig(steps=8, cfg_scale=2.0, seed=seed, **kwargs)
    rng = np.random.default_rng(7)
    refs = rng.uniform(size=(2, IMG_DIM))
    return sample_batch(model, caps, cfg, adapter_images=refs)


# ---------------------------------------------------------------------------
# attach / detach


def test_attach_registers_tagged_params():
    model = fresh_model()
    attach(model, AdapterEncoder(model_hidden=32, blocks=2))
    names = model.store.names("adapter")
    assert "adapter.enc.w1" in names and "adapter.mod1.shift.w" in names
    assert "adapter" in model.modules


def test_double_attach_rejected():
    model = fresh_model()
    attach(model, AdapterEncoder(model_hidden=32, blocks=2))
    with pytest.raises(ParamStoreError):
        attach(model, AdapterEncoder(model_hidden=32, blocks=2))


def test_detach_removes_every_tagged_param():
    model = fresh_model()
    attach(model, BgModule(model_hidden=32, blocks=2))
    detach(model, "sr_bg")
    assert model.store.names("sr_bg") == []
    assert "sr_bg" not in model.modules
    with pytest.raises(ParamStoreError):
        detach(model, "sr_bg")


def test_attach_adopts_checkpoint_params():
    """Attaching when tagged params already exist must not re-initialize them."""
    model = fresh_model()
    attach(model, AdapterEncoder(model_hidden=32, blocks=2))
    marker = model.store.get("adapter.enc.w2")
    marker.data[:] = 5.0
    del model.modules["adapter"]
    attach(model, AdapterEncoder(model_hidden=32, blocks=2, init_seed=99))
    assert np.array_equal(model.store.get("adapter.enc.w2").data, marker.data)


# ---------------------------------------------------------------------------
# zero effect when untrained: outputs stay bit-identical


@pytest.mark.parametrize(
    "module_factory",
    [
        lambda m: AdapterEncoder(model_hidden=32, blocks=2),
        lambda m: LoraModule(default_lora_targets(m)),
        lambda m: ControlBranch(model_hidden=32, blocks=2),
        lambda m: BgModule(model_hidden=32, blocks=2),
    ],
    ids=["adapter", "sr_lora", "sr_cn", "sr_bg"],
)
def test_untrained_module_has_bitwise_zero_effect(module_factory):
    before = gen(fresh_model())
    model = fresh_model()
    attach(model, module_factory(model))
    assert np.array_equal(gen(model), before)


def test_trained_module_changes_outputs():
    model = fresh_model()
    attach(model, AdapterEncoder(model_hidden=32, blocks=2))
    before = gen(model)
    model.store.get("adapter.enc.w2").data[:] = 0.5
    assert not np.array_equal(gen(model), before)


def test_detach_restores_base_outputs_bitwise():
    base = gen(fresh_model())
    model = fresh_model()
    attach(model, ControlBranch(model_hidden=32, blocks=2))
    model.store.get("sr_cn.proj0.w").data[:] = 1.0  # train-ish perturbation
    attach(model, BgModule(model_hidden=32, blocks=2))
    model.store.get("sr_bg.proj.w").data[:] = 1.0
    detach(model, "sr_cn")
    detach(model, "sr_bg")
    assert np.array_equal(gen(model), base)


def test_ip_scale_zero_ignores_trained_adapter():
    model = fresh_model()
    attach(model, AdapterEncoder(model_hidden=32, blocks=2))
    model.store.get("adapter.enc.w2").data[:] = 0.5
    assert np.array_equal(gen(model, ip_scale=0.0), gen(fresh_model(), ip_scale=0.0))


# ---------------------------------------------------------------------------
# adapter encoder


def test_encode_reference_standardizes_and_reshapes():
    model = fresh_model()
    enc = AdapterEncoder(model_hidden=32, blocks=2)
    attach(model, enc)
    st = model.store
    img = np.random.default_rng(0).uniform(size=(16, 16))
    out = encode_reference(enc, st, img)
    assert out.shape == (1, ADAPTER_DIM)
    direct = enc.encode(st, Tensor(to_flow(img.reshape(1, -1))))
    assert np.array_equal(out.data, direct.data)


def test_encode_rejects_wrong_width():
    model = fresh_model()
    enc = AdapterEncoder(model_hidden=32, blocks=2)
    attach(model, enc)
    with pytest.raises(ShapeError):
        enc.encode(model.store, Tensor(np.zeros((2, IMG_DIM + 1))))


def test_untrained_encoder_emits_zero_embedding():
    model = fresh_model()
    enc = AdapterEncoder(model_hidden=32, blocks=2)
    attach(model, enc)
    out = encode_reference(enc, model.store, np.random.default_rng(1).uniform(size=(3, IMG_DIM)))
    assert np.array_equal(out.data, np.zeros((3, ADAPTER_DIM)))


# ---------------------------------------------------------------------------
# lora algebra, checked against an independent dense-weight oracle


def test_lora_delta_matches_dense_oracle():
    model = fresh_model()
    lora = LoraModule(default_lora_targets(model), rank=4, alpha=4.0)
    attach(model, lora)
    st = model.store
    rng = np.random.default_rng(3)
    for name in lora.targets:
        st.get(f"sr_lora.{name}.down").data[:] = rng.normal(size=(4, st.get(name).shape[0]))
        st.get(f"sr_lora.{name}.up").data[:] = rng.normal(size=(st.get(name).shape[1], 4))
    name = lora.targets[0]
    w = st.get(name).data  # (d_in, d_out)
    down = st.get(f"sr_lora.{name}.down").data
    up = st.get(f"sr_lora.{name}.up").data
    oracle = lora_apply(w.T, down, up, alpha=4.0)  # (d_out, d_in) convention
    assert np.allclose(w + lora.delta(st, name).data, oracle.T, atol=1e-12)


def test_lora_apply_validates_shapes():
    with pytest.raises(ShapeError):
        lora_apply(np.zeros((5, 6)), np.zeros((2, 6)), np.zeros((5, 3)), alpha=1.0)


def test_lora_zero_up_means_zero_delta():
    model = fresh_model()
    lora = LoraModule(default_lora_targets(model))
    attach(model, lora)
    for name in lora.targets:
        assert np.array_equal(lora.delta(model.store, name).data, np.zeros(model.store.get(name).shape))


def test_default_lora_targets_cover_block_linears():
    model = fresh_model()
    targets = default_lora_targets(model)
    assert targets == [
        "base.block0.fc1.w", "base.block0.fc2.w",
        "base.block1.fc1.w", "base.block1.fc2.w",
    ]


# ---------------------------------------------------------------------------
# control branch and bg module shapes


def test_control_forward_shapes_and_validation():
    model = fresh_model()
    branch = ControlBranch(model_hidden=32, blocks=2)
    attach(model, branch)
    feats = control_forward(branch, model.store, np.zeros((16, 16)))
    assert len(feats) == 2 and feats[0].shape == (1, 32)
    with pytest.raises(ShapeError):
        branch.forward(model.store, Tensor(np.zeros((2, 7))))


def test_bg_module_untrained_embedding_is_zero():
    model = fresh_model()
    bg = BgModule(model_hidden=32, blocks=2)
    attach(model, bg)
    emb = bg.embed(model.store, Tensor(np.array([[0.1], [0.3]])))
    assert np.array_equal(emb.data, np.zeros((2, bg.emb_dim)))
