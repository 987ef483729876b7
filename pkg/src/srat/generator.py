"""Conditional flow-matching velocity network with CFG Euler sampling.

The backbone is an MLP with residual blocks. Conditioning enters through
per-block feature-wise affine modulation (scale/shift). The modulation input
is the documented bundle layout

    [ time(16) | rot token(16) | bright token(16) | adapter(32) | bg(8) ]

where the base model owns projections for the first 48 dims and each
optional module (adapter, background) owns its own projection rows, so a
frozen base model still passes gradients to a training adapter. Control
features are added to the first linear output of each block, before the
affine modulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .params import ParamStore
from .rng import stream
from .tensor import NonFiniteError, Tensor
from .world import BRIGHT_BUCKETS, ROT_BUCKETS, SIZE, UNSPEC, CaptionTokens

IMG_DIM = SIZE * SIZE
T_EMB_DIM = 16
TOKEN_DIM = 16
ADAPTER_DIM = 32
BG_EMB_DIM = 8
BASE_COND_DIM = T_EMB_DIM + 2 * TOKEN_DIM  # time + rot + bright

# nominal dataset pixel statistics; the flow runs in standardized space
DATA_MEAN = 0.25
DATA_STD = 0.15


@dataclass
class SamplerConfig:
    steps: int = 28
    cfg_scale: float = 3.5
    ip_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0 or self.ip_scale < 0:
            raise ValueError("cfg_scale and ip_scale must be >= 0")


@dataclass
class ConditioningBundle:
    """Per-sample conditioning parts; absent parts contribute exactly zero."""

    t_emb: Tensor
    prompt_emb: Tensor  # concat of rot and bright token embeddings
    adapter_emb: Tensor | None = None  # already multiplied by ip_scale
    control_feats: list[Tensor] | None = None
    bg_emb: Tensor | None = None

    @property
    def base_vector(self) -> Tensor:
        return T.concat([self.t_emb, self.prompt_emb], axis=1)


def time_embedding(t, batch: int) -> np.ndarray:
    """Sinusoidal embedding of t in [0, 1], dim 16."""
    tval = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (batch, 1))
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), T_EMB_DIM // 2))
    ang = tval * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _token_indices(captions: list[CaptionTokens]):
    rot = np.array(
        [ROT_BUCKETS if c.rot_bucket == UNSPEC else c.rot_bucket for c in captions]
    )
    bright = np.array(
        [BRIGHT_BUCKETS if c.bright_bucket == UNSPEC else c.bright_bucket for c in captions]
    )
    return rot, bright


class VelocityModel:
    """Velocity field wiring over a ParamStore; all state lives in the store.

    Attached modules (adapter, lora, control branch, background) are tracked
    in ``modules`` by tag and consulted during the forward pass.
    """

    def __init__(
        self,
        store: ParamStore,
        data_dim: int = IMG_DIM,
        hidden: int = 128,
        blocks: int = 3,
        init_seed: int = 0,
    ):
        self.store = store
        self.data_dim = data_dim
        self.hidden = hidden
        self.blocks = blocks
        self.modules: dict[str, object] = {}
        self.film_identity_override = False  # test hook: force scale 1, shift 0
        if "base.in.w" not in store.entries:
            self._init_params(init_seed)

    def _init_params(self, seed: int) -> None:
        rng = stream("model-init", seed)
        d, h = self.data_dim, self.hidden

        def gauss(shape, scale):
            return Tensor(rng.normal(0.0, scale, size=shape))

        reg = self.store.register
        reg("base.in.w", gauss((d, h), d**-0.5), "base")
        reg("base.in.b", Tensor(np.zeros(h)), "base")
        for i in range(self.blocks):
            reg(f"base.block{i}.fc1.w", gauss((h, h), h**-0.5), "base")
            reg(f"base.block{i}.fc1.b", Tensor(np.zeros(h)), "base")
            reg(f"base.block{i}.fc2.w", gauss((h, h), 0.5 * h**-0.5), "base")
            reg(f"base.block{i}.fc2.b", Tensor(np.zeros(h)), "base")
            # zero-init modulation: the block starts as an unconditional MLP
            reg(f"base.block{i}.mod_scale.w", Tensor(np.zeros((BASE_COND_DIM, h))), "base")
            reg(f"base.block{i}.mod_scale.b", Tensor(np.zeros(h)), "base")
            reg(f"base.block{i}.mod_shift.w", Tensor(np.zeros((BASE_COND_DIM, h))), "base")
            reg(f"base.block{i}.mod_shift.b", Tensor(np.zeros(h)), "base")
        reg("base.out.w", gauss((h, d), 0.1 * h**-0.5), "base")
        reg("base.out.b", Tensor(np.zeros(d)), "base")
        # token tables; the extra row is the dedicated UNSPEC embedding
        reg("base.tok_rot", gauss((ROT_BUCKETS + 1, TOKEN_DIM), 0.3), "base")
        reg("base.tok_bright", gauss((BRIGHT_BUCKETS + 1, TOKEN_DIM), 0.3), "base")

    # -- conditioning -----------------------------------------------------

    def embed_condition(
        self,
        t,
        captions: list[CaptionTokens],
        adapter_emb: Tensor | None = None,
        control_feats: list[Tensor] | None = None,
        bg_emb: Tensor | None = None,
        ip_scale: float = 1.0,
    ) -> ConditioningBundle:
        batch = len(captions)
        rot_idx, bright_idx = _token_indices(captions)
        rot_e = T.embedding(self.store.get("base.tok_rot"), rot_idx)
        bright_e = T.embedding(self.store.get("base.tok_bright"), bright_idx)
        scaled = None
        if adapter_emb is not None:
            scaled = T.scale(adapter_emb, ip_scale) if ip_scale != 1.0 else adapter_emb
            if ip_scale == 0.0:
                scaled = None  # exact no-op contract
        return ConditioningBundle(
            t_emb=Tensor(time_embedding(t, batch)),
            prompt_emb=T.concat([rot_e, bright_e], axis=1),
            adapter_emb=scaled,
            control_feats=control_feats,
            bg_emb=bg_emb,
        )

    # -- forward ----------------------------------------------------------

    def _layer_weight(self, name: str) -> Tensor:
        w = self.store.get(name)
        lora = self.modules.get("sr_lora")
        if lora is not None and name in lora.targets:
            w = T.add(w, lora.delta(self.store, name))
        return w

    def forward(self, x: Tensor, bundle: ConditioningBundle) -> Tensor:
        get = self.store.get
        cond = bundle.base_vector
        h = T.silu(T.linear(x, self._layer_weight("base.in.w"), get("base.in.b")))
        adapter = self.modules.get("adapter")
        bg_mod = self.modules.get("sr_bg")
        for i in range(self.blocks):
            u = T.linear(h, self._layer_weight(f"base.block{i}.fc1.w"), get(f"base.block{i}.fc1.b"))
            if bundle.control_feats is not None:
                u = T.add(u, bundle.control_feats[i])
            if self.film_identity_override:
                sc, sh = None, None
            else:
                sc = T.linear(cond, get(f"base.block{i}.mod_scale.w"), get(f"base.block{i}.mod_scale.b"))
                sh = T.linear(cond, get(f"base.block{i}.mod_shift.w"), get(f"base.block{i}.mod_shift.b"))
                if adapter is not None and bundle.adapter_emb is not None:
                    sc = T.add(sc, adapter.modulation(self.store, i, "scale", bundle.adapter_emb))
                    sh = T.add(sh, adapter.modulation(self.store, i, "shift", bundle.adapter_emb))
                if bg_mod is not None and bundle.bg_emb is not None:
                    sc = T.add(sc, bg_mod.modulation(self.store, i, "scale", bundle.bg_emb))
                    sh = T.add(sh, bg_mod.modulation(self.store, i, "shift", bundle.bg_emb))
            if sc is not None:
                u = T.add(T.mul(u, T.add(sc, 1.0)), sh)
            u = T.silu(u)
            u = T.linear(u, self._layer_weight(f"base.block{i}.fc2.w"), get(f"base.block{i}.fc2.b"))
            h = T.add(h, u)
        return T.linear(h, self._layer_weight("base.out.w"), get("base.out.b"))


# ---------------------------------------------------------------------------
# flow matching


def oracle_velocity(x_t: np.ndarray, t: float, x1: np.ndarray) -> np.ndarray:
    """Exact single-datum flow field pointing at x1."""
    if t >= 1.0:
        raise ValueError("oracle velocity undefined at t >= 1")
    return (np.asarray(x1) - np.asarray(x_t)) / (1.0 - t)


def cfm_loss(model: VelocityModel, x1: np.ndarray, bundle_builder, rng) -> Tensor:
    """Flow-matching loss over a batch.

    x1: (B, D) clean data. bundle_builder(t) -> ConditioningBundle for the
    batch (prompt dropout and module wiring happen inside the builder).
    """
    batch = x1.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    t = rng.uniform(0.0, 1.0, size=batch)
    x0 = rng.standard_normal(size=x1.shape)
    xt = (1.0 - t[:, None]) * x0 + t[:, None] * x1
    target = x1 - x0
    bundle = bundle_builder(t)
    pred = model.forward(Tensor(xt), bundle)
    return T.mse_loss(pred, Tensor(target))


# ---------------------------------------------------------------------------
# sampling


def sample_flow(
    velocity_fn,
    x0: np.ndarray,
    steps: int,
) -> np.ndarray:
    """Euler integration of dx/dt = v(x, t) from t=0 to 1."""
    x = np.array(x0, copy=True)
    h = 1.0 / steps
    for k in range(steps):
        t = k / steps
        v = velocity_fn(x, t)
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("non-finite velocity during integration")
        x = x + h * v
    return x


def sample_batch(
    model: VelocityModel,
    captions: list[CaptionTokens],
    config: SamplerConfig,
    adapter_images: np.ndarray | None = None,
    control_maps: np.ndarray | None = None,
    bg_values: np.ndarray | None = None,
    x0: np.ndarray | None = None,
) -> np.ndarray:
    """Generate a batch of flattened images (unclamped ODE endpoints).

    CFG mixes conditional and unconditional (all-UNSPEC prompt) velocities;
    the adapter embedding and any attached shortcut inputs appear in both
    branches. Initial noise is keyed per cell by (seed, cell index) unless
    ``x0`` is given.
    """
    batch = len(captions)
    if x0 is None:
        x0 = np.stack(
            [stream("sample-x0", config.seed, i).standard_normal(model.data_dim) for i in range(batch)]
        )
    uncond = [CaptionTokens()] * batch

    adapter_emb = None
    adapter = model.modules.get("adapter")
    if adapter is not None and adapter_images is not None:
        adapter_emb = adapter.encode(model.store, Tensor(adapter_images))

    control_feats = None
    branch = model.modules.get("sr_cn")
    if branch is not None and control_maps is not None:
        control_feats = branch.forward(model.store, Tensor(control_maps))

    bg_emb = None
    bg_mod = model.modules.get("sr_bg")
    if bg_mod is not None and bg_values is not None:
        bg_emb = bg_mod.embed(model.store, Tensor(np.asarray(bg_values).reshape(-1, 1)))

    def velocity(x, t):
        def branch_v(caps):
            bundle = model.embed_condition(
                t, caps, adapter_emb=adapter_emb, control_feats=control_feats,
                bg_emb=bg_emb, ip_scale=config.ip_scale,
            )
            return model.forward(Tensor(x), bundle).data

        if config.cfg_scale == 1.0:
            return branch_v(captions)
        if config.cfg_scale == 0.0:
            return branch_v(uncond)
        v_c = branch_v(captions)
        v_u = branch_v(uncond)
        return v_u + config.cfg_scale * (v_c - v_u)

    return sample_flow(velocity, x0, config.steps)


def to_flow(images) -> np.ndarray:
    """Map [0, 1] pixel arrays into the normalized space the flow is trained in.

    Raw pixels have per-pixel std ~0.15 against unit Gaussian noise; training
    on them directly starves every conditioning pathway of gradient signal, so
    all data entering cfm_loss or the adapter encoder is standardized first.
    """
    return (np.asarray(images, dtype=np.float64) - DATA_MEAN) / DATA_STD


def to_images(x: np.ndarray) -> np.ndarray:
    """De-normalize ODE endpoints and clamp into [0, 1] images, (B, 16, 16)."""
    return np.clip(x * DATA_STD + DATA_MEAN, 0.0, 1.0).reshape(-1, SIZE, SIZE)
