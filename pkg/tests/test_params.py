"""Parameter store: tags, freezing, Adam, and checkpoint round-trips."""

import numpy as np
import pytest

from srat import tensor as T
from srat.params import (
    AdamHyper,
    ParamStore,
    ParamStoreError,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)
from srat.tensor import Tensor, backward

RNG = np.random.default_rng(7)


def small_store():
    store = ParamStore()
    store.register("base.w", Tensor(RNG.normal(size=(3, 2))), "base")
    store.register("adapter.w", Tensor(RNG.normal(size=(2, 2))), "adapter")
    store.register("sr_cn.w", Tensor(RNG.normal(size=(4,))), "sr_cn")
    return store


def test_register_rejects_duplicates_and_unknown_tags():
    store = small_store()
    with pytest.raises(ParamStoreError):
        store.register("base.w", Tensor(np.zeros(2)), "base")
    with pytest.raises(ParamStoreError):
        store.register("other", Tensor(np.zeros(2)), "nope")


def test_freeze_all_except():
    store = small_store()
    store.freeze_all_except(["adapter"])
    assert not store.get("base.w").requires_grad
    assert store.get("adapter.w").requires_grad
    assert not store.entries["base.w"].trainable


def test_remove_tag():
    store = small_store()
    assert store.remove_tag("sr_cn") == 1
    assert store.names() == ["base.w", "adapter.w"]
    with pytest.raises(ParamStoreError):
        store.remove_tag("sr_cn")


def test_adam_first_step_is_signed_lr():
    # with bias correction, |update| = lr regardless of gradient magnitude
    store = ParamStore()
    w = store.register("base.w", Tensor(np.zeros(3)), "base")
    w.grad = np.array([0.5, -2.0, 1e-3])
    adam_step(store, AdamHyper(lr=0.1))
    assert np.allclose(w.data, [-0.1, 0.1, -0.1], atol=1e-6)


def test_adam_converges_on_quadratic():
    store = ParamStore()
    w = store.register("base.w", Tensor(np.array([5.0])), "base")
    for _ in range(800):
        w.grad = 2.0 * (w.data - 3.0)
        adam_step(store, AdamHyper(lr=0.05))
    assert abs(float(w.data[0]) - 3.0) < 1e-2


def test_adam_skips_frozen_and_requires_grad_for_trainable():
    store = small_store()
    store.freeze_all_except(["adapter"])
    before = store.get("base.w").data.copy()
    store.get("adapter.w").grad = np.ones((2, 2))
    adam_step(store, AdamHyper())
    assert np.array_equal(store.get("base.w").data, before)
    store.zero_grad()
    with pytest.raises(ParamStoreError):
        adam_step(store, AdamHyper())  # trainable entry missing its gradient


def test_hyper_validation():
    with pytest.raises(ValueError):
        AdamHyper(lr=-1.0)
    with pytest.raises(ValueError):
        AdamHyper(beta1=1.0)


def test_checkpoint_roundtrip(tmp_path):
    store = small_store()
    store.set_trainable(["base"], False)
    path = tmp_path / "ck.srat"
    save_checkpoint(store, path)
    loaded = load_checkpoint(path)
    assert loaded.names() == store.names()
    for name in store.names():
        assert np.array_equal(
            loaded.get(name).data, store.get(name).data.astype(np.float32)
        )
        assert loaded.entries[name].trainable == store.entries[name].trainable
        assert loaded.tag_of(name) == store.tag_of(name)


def test_checkpoint_tag_filter(tmp_path):
    store = small_store()
    path = tmp_path / "ck.srat"
    save_checkpoint(store, path)
    loaded = load_checkpoint(path, tags=("base", "adapter"))
    assert loaded.names() == ["base.w", "adapter.w"]


def test_checkpoint_truncation_detected(tmp_path):
    store = small_store()
    path = tmp_path / "ck.srat"
    save_checkpoint(store, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(ParamStoreError):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "ck.srat"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ParamStoreError):
        load_checkpoint(path)


def test_access_log():
    store = small_store()
    store.start_access_log()
    store.get("base.w")
    store.get("adapter.w")
    assert store.stop_access_log() == ["base.w", "adapter.w"]
    store.get("sr_cn.w")  # no log once stopped
    assert store.access_log is None


def test_frozen_params_bit_identical_through_training_step():
    store = small_store()
    store.freeze_all_except(["adapter"])
    frozen = store.snapshot(tags=["base", "sr_cn"])
    x = Tensor(RNG.normal(size=(5, 2)))
    loss = T.mse_loss(T.matmul(x, store.get("adapter.w")), Tensor(np.zeros((5, 2))))
    backward(loss)
    adam_step(store, AdamHyper())
    for name, arr in frozen.items():
        assert np.array_equal(arr, store.get(name).data)
