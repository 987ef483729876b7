"""Adapter and shortcut modules, plus attach/detach mechanics.

Every module registers named, tagged parameters in the shared ParamStore and
is tracked on the model by tag. All of them are exactly inert when untrained:
the adapter's final encoder layer, the LoRA up factors, the control branch
projections, and the background output projection are all zero-initialized,
so attaching an untrained module leaves generator outputs bit-identical.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .generator import ADAPTER_DIM, BG_EMB_DIM, IMG_DIM, VelocityModel, to_flow
from .params import ParamStore, ParamStoreError
from .rng import stream
from .tensor import Tensor


class AdapterEncoder:
    """Reference-image encoder steering the generator, tag ``adapter``."""

    tag = "adapter"

    def __init__(self, hidden: int = 64, out_dim: int = ADAPTER_DIM,
                 blocks: int = 3, model_hidden: int = 128, init_seed: int = 0):
        self.hidden = hidden
        self.out_dim = out_dim
        self.blocks = blocks
        self.model_hidden = model_hidden
        self.init_seed = init_seed

    def register(self, store: ParamStore) -> None:
        rng = stream("adapter-init", self.init_seed)
        reg = store.register
        reg("adapter.enc.w1", Tensor(rng.normal(0, IMG_DIM**-0.5, (IMG_DIM, self.hidden))), self.tag)
        reg("adapter.enc.b1", Tensor(np.zeros(self.hidden)), self.tag)
        # zero-init output: untrained adapter emits the zero embedding
        reg("adapter.enc.w2", Tensor(np.zeros((self.hidden, self.out_dim))), self.tag)
        reg("adapter.enc.b2", Tensor(np.zeros(self.out_dim)), self.tag)
        # injection rows are randomly initialized so the embedding gradient
        # is alive even while the base modulation weights stay frozen
        for i in range(self.blocks):
            for part in ("scale", "shift"):
                reg(
                    f"adapter.mod{i}.{part}.w",
                    Tensor(rng.normal(0, 0.3 * self.out_dim**-0.5, (self.out_dim, self.model_hidden))),
                    self.tag,
                )

    def encode(self, store: ParamStore, images: Tensor) -> Tensor:
        if images.shape[1] != IMG_DIM:
            raise T.ShapeError(f"expected (B, {IMG_DIM}) images, got {images.shape}")
        h = T.silu(T.linear(images, store.get("adapter.enc.w1"), store.get("adapter.enc.b1")))
        return T.linear(h, store.get("adapter.enc.w2"), store.get("adapter.enc.b2"))

    def modulation(self, store: ParamStore, block: int, part: str, emb: Tensor) -> Tensor:
        return T.matmul(emb, store.get(f"adapter.mod{block}.{part}.w"))


def encode_reference(encoder: AdapterEncoder, store: ParamStore, images) -> Tensor:
    """Encode [0, 1] reference images, standardizing into flow space first."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2 and arr.shape == (16, 16):
        arr = arr.reshape(1, -1)
    return encoder.encode(store, Tensor(to_flow(arr.reshape(arr.shape[0], -1))))


class LoraModule:
    """Low-rank deltas for the generator's hidden linear layers, tag ``sr_lora``."""

    tag = "sr_lora"

    def __init__(self, targets: list[str], rank: int = 4, alpha: float = 4.0, init_seed: int = 0):
        self.targets = list(targets)
        self.rank = rank
        self.alpha = alpha
        self.init_seed = init_seed

    def register(self, store: ParamStore) -> None:
        rng = stream("lora-init", self.init_seed)
        for name in self.targets:
            d_in, d_out = store.get(name).shape
            store.register(
                f"sr_lora.{name}.down",
                Tensor(rng.normal(0, d_in**-0.5, (self.rank, d_in))),
                self.tag,
            )
            # zero-init up factor: zero initial delta
            store.register(f"sr_lora.{name}.up", Tensor(np.zeros((d_out, self.rank))), self.tag)

    def delta(self, store: ParamStore, name: str) -> Tensor:
        down = store.get(f"sr_lora.{name}.down")  # (r, d_in)
        up = store.get(f"sr_lora.{name}.up")  # (d_out, r)
        # stored layer weights are (d_in, d_out): delta = ((alpha/r) up @ down)^T
        return T.scale(T.matmul(T.transpose(down), T.transpose(up)), self.alpha / self.rank)


def lora_apply(base_weight: np.ndarray, down: np.ndarray, up: np.ndarray, alpha: float) -> np.ndarray:
    """Effective weight W + (alpha/r) * up @ down, in (d_out, d_in) convention."""
    rank = down.shape[0]
    if up.shape[1] != rank or base_weight.shape != (up.shape[0], down.shape[1]):
        raise T.ShapeError(
            f"lora shapes: W{base_weight.shape}, up{up.shape}, down{down.shape}"
        )
    return base_weight + (alpha / rank) * (up @ down)


class ControlBranch:
    """Pose-map encoder with zero-initialized per-block projections, tag ``sr_cn``."""

    tag = "sr_cn"

    def __init__(self, hidden: int = 64, blocks: int = 3, model_hidden: int = 128, init_seed: int = 0):
        self.hidden = hidden
        self.blocks = blocks
        self.model_hidden = model_hidden
        self.init_seed = init_seed

    def register(self, store: ParamStore) -> None:
        rng = stream("cn-init", self.init_seed)
        reg = store.register
        reg("sr_cn.enc.w1", Tensor(rng.normal(0, IMG_DIM**-0.5, (IMG_DIM, self.hidden))), self.tag)
        reg("sr_cn.enc.b1", Tensor(np.zeros(self.hidden)), self.tag)
        for i in range(self.blocks):
            # zero-convolution convention: untrained branch changes nothing
            reg(f"sr_cn.proj{i}.w", Tensor(np.zeros((self.hidden, self.model_hidden))), self.tag)
            reg(f"sr_cn.proj{i}.b", Tensor(np.zeros(self.model_hidden)), self.tag)

    def forward(self, store: ParamStore, maps: Tensor) -> list[Tensor]:
        if maps.shape[1] != IMG_DIM:
            raise T.ShapeError(f"expected (B, {IMG_DIM}) maps, got {maps.shape}")
        f = T.silu(T.linear(maps, store.get("sr_cn.enc.w1"), store.get("sr_cn.enc.b1")))
        return [
            T.linear(f, store.get(f"sr_cn.proj{i}.w"), store.get(f"sr_cn.proj{i}.b"))
            for i in range(self.blocks)
        ]


def control_forward(branch: ControlBranch, store: ParamStore, maps) -> list[Tensor]:
    arr = np.asarray(maps, dtype=np.float64)
    if arr.ndim == 2 and arr.shape == (16, 16):
        arr = arr.reshape(1, -1)
    return branch.forward(store, Tensor(arr.reshape(arr.shape[0], -1)))


class BgModule:
    """Scalar brightness shortcut with zero-initialized output, tag ``sr_bg``."""

    tag = "sr_bg"

    def __init__(self, emb_dim: int = BG_EMB_DIM, blocks: int = 3, model_hidden: int = 128, init_seed: int = 0):
        self.emb_dim = emb_dim
        self.blocks = blocks
        self.model_hidden = model_hidden
        self.init_seed = init_seed

    def register(self, store: ParamStore) -> None:
        rng = stream("bg-init", self.init_seed)
        reg = store.register
        reg("sr_bg.in.w", Tensor(rng.normal(0, 1.0, (1, self.emb_dim))), self.tag)
        reg("sr_bg.in.b", Tensor(np.zeros(self.emb_dim)), self.tag)
        # zero-init output projection: no effect when untrained
        reg("sr_bg.proj.w", Tensor(np.zeros((self.emb_dim, self.emb_dim))), self.tag)
        reg("sr_bg.proj.b", Tensor(np.zeros(self.emb_dim)), self.tag)
        for i in range(self.blocks):
            for part in ("scale", "shift"):
                reg(
                    f"sr_bg.mod{i}.{part}.w",
                    Tensor(rng.normal(0, 0.3 * self.emb_dim**-0.5, (self.emb_dim, self.model_hidden))),
                    self.tag,
                )

    def embed(self, store: ParamStore, bg: Tensor) -> Tensor:
        h = T.silu(T.linear(bg, store.get("sr_bg.in.w"), store.get("sr_bg.in.b")))
        return T.linear(h, store.get("sr_bg.proj.w"), store.get("sr_bg.proj.b"))

    def modulation(self, store: ParamStore, block: int, part: str, emb: Tensor) -> Tensor:
        return T.matmul(emb, store.get(f"sr_bg.mod{block}.{part}.w"))


MODULE_TYPES = {
    "adapter": AdapterEncoder,
    "sr_lora": LoraModule,
    "sr_cn": ControlBranch,
    "sr_bg": BgModule,
}


def attach(model: VelocityModel, module) -> None:
    """Register a module's parameters and hook it into the forward pass."""
    if module.tag in model.modules:
        raise ParamStoreError(f"module with tag {module.tag!r} already attached")
    if any(model.store.names(module.tag)):
        # parameters already present (e.g. loaded from a checkpoint): adopt them
        model.modules[module.tag] = module
        return
    module.register(model.store)
    model.modules[module.tag] = module


def detach(model: VelocityModel, tag: str) -> None:
    """Remove every parameter and forward hook carrying ``tag``."""
    if tag not in model.modules:
        raise ParamStoreError(f"no module with tag {tag!r} attached")
    model.store.remove_tag(tag)
    del model.modules[tag]


def default_lora_targets(model: VelocityModel) -> list[str]:
    return [
        f"base.block{i}.fc{j}.w" for i in range(model.blocks) for j in (1, 2)
    ]
