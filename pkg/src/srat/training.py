"""Staged training pipeline: base pretraining, shortcut pretraining, adapter.

A run plan is an ordered list of stages forming a linear dependency chain.
Every stage checkpoint stores the full parameter store, so loading the last
dependency's checkpoint restores everything trained so far. Checkpoints are
content-addressed by a hash of the stage configuration (including the hashes
of its dependencies), which lets independent presets share identical stages
— e.g. every preset at a given seed reuses one base checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import world
from .adapters import (
    AdapterEncoder,
    BgModule,
    ControlBranch,
    LoraModule,
    attach,
    default_lora_targets,
)
from .generator import VelocityModel, cfm_loss, to_flow
from .params import AdamHyper, ParamStore, ParamStoreError, adam_step, load_checkpoint, save_checkpoint
from .rng import derive_seed, stream
from . import tensor as T
from .tensor import NonFiniteError, Tensor, backward
from .world import UNSPEC, CaptionTokens

STAGE_KINDS = ("base", "sr_lora", "sr_cn", "sr_bg", "adapter")
PRESETS = ("vanilla", "sr_lora", "sr_cn", "sr_bg", "sr_lora_cn", "sr_lora_cn_bg")

MODEL_HIDDEN = 128
MODEL_BLOCKS = 3

DEFAULT_STEPS = {"base": 20000, "sr_lora": 5000, "sr_cn": 5000, "sr_bg": 5000, "adapter": 10000}
DEFAULT_DATASET_COUNT = 20000


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    domain: str
    count: int
    seed: int

    def __post_init__(self):
        if self.domain not in ("base", "finetune"):
            raise TrainingError(f"unknown domain {self.domain!r}")
        if self.count <= 0:
            raise TrainingError("dataset count must be positive")


@dataclass(frozen=True)
class StageConfig:
    name: str
    kind: str
    dataset: DatasetSpec
    steps: int
    deps: tuple[str, ...] = ()
    attached_tags: tuple[str, ...] = ()
    batch: int = 32
    hyper: AdamHyper = field(default_factory=AdamHyper)
    p_drop: float = 0.1
    train_seed: int = 0
    init_seed: int = 0
    warmup_steps: int = 0  # linear lr warmup, off by default
    lr_schedule: str = "constant"  # or "half-cosine": decay to 10% over the 2nd half
    adapter_jitter: float = 0.0  # optional noise on the reference image
    # probability of zeroing a sample's control features, so the
    # branch-removed inference mode stays in-distribution for the adapter
    control_drop: float = 0.0
    # fade control features linearly to zero over the last N steps, easing
    # the adapter into the branch-removed inference mode while the decayed
    # learning rate limits how much rerouted signal it can reabsorb
    control_anneal: int = 0

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise TrainingError(f"unknown stage kind {self.kind!r}")
        if self.lr_schedule not in ("constant", "half-cosine"):
            raise TrainingError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.steps < 0 or self.batch <= 0:
            raise TrainingError("steps must be >= 0 and batch positive")
        if not 0.0 <= self.p_drop <= 1.0:
            raise TrainingError("p_drop must lie in [0, 1]")
        if not 0.0 <= self.control_drop <= 1.0:
            raise TrainingError("control_drop must lie in [0, 1]")
        if self.control_anneal < 0 or self.control_anneal > self.steps:
            raise TrainingError("control_anneal must lie in [0, steps]")
        allowed = set(self.attached_tags) | {"base", "adapter"}
        if any(t not in allowed for t in self.trainable_tags):
            raise TrainingError("trainable tags must be attached or built-in")

    @property
    def trainable_tags(self) -> tuple[str, ...]:
        if self.kind == "base":
            return ("base",)
        if self.kind == "adapter":
            return ("adapter",)
        return (self.kind,)

    def config_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dataset": [self.dataset.domain, self.dataset.count, self.dataset.seed],
            "steps": self.steps,
            "attached_tags": sorted(self.attached_tags),
            "batch": self.batch,
            "hyper": vars(self.hyper),
            "p_drop": self.p_drop,
            "train_seed": self.train_seed,
            "init_seed": self.init_seed,
            "warmup_steps": self.warmup_steps,
            "lr_schedule": self.lr_schedule,
            "adapter_jitter": self.adapter_jitter,
            "control_drop": self.control_drop,
            "control_anneal": self.control_anneal,
            "model": [MODEL_HIDDEN, MODEL_BLOCKS],
        }


@dataclass
class RunPlan:
    preset: str
    seed: int
    stages: list[StageConfig]

    def __post_init__(self):
        seen: set[str] = set()
        for stage in self.stages:
            missing = [d for d in stage.deps if d not in seen]
            if missing:
                raise TrainingError(f"stage {stage.name!r} depends on unbuilt {missing}")
            seen.add(stage.name)

    def stage(self, name: str) -> StageConfig:
        for s in self.stages:
            if s.name == name:
                return s
        raise TrainingError(f"no stage named {name!r}")


def build_run_plan(
    preset: str,
    seed: int = 0,
    overrides: dict[str, dict] | None = None,
    adapter_domain: str | None = None,
) -> RunPlan:
    """Construct the staged plan for a preset.

    ``overrides`` maps stage name to StageConfig field overrides (used to
    shrink budgets in tests). ``adapter_domain`` forces the adapter stage's
    training domain, e.g. a vanilla adapter trained on the finetune domain
    for prior-preservation comparisons.
    """
    if preset not in PRESETS:
        raise TrainingError(f"unknown preset {preset!r}; choose from {PRESETS}")
    shortcuts = {
        "vanilla": (),
        "sr_lora": ("sr_lora",),
        "sr_cn": ("sr_cn",),
        "sr_bg": ("sr_bg",),
        "sr_lora_cn": ("sr_lora", "sr_cn"),
        "sr_lora_cn_bg": ("sr_lora", "sr_cn", "sr_bg"),
    }[preset]
    # domain-shift shortcuts pull the whole pipeline onto the finetune domain
    shift_domain = "finetune" if "sr_lora" in shortcuts else "base"
    if adapter_domain is None:
        adapter_domain = shift_domain

    def mk(name: str, kind: str, domain: str, deps: tuple[str, ...], attached: tuple[str, ...]) -> StageConfig:
        lr = 1e-3 if kind == "base" else 5e-4
        cfg = StageConfig(
            name=name,
            kind=kind,
            dataset=DatasetSpec(domain, DEFAULT_DATASET_COUNT, derive_seed(seed, name, "data")),
            steps=DEFAULT_STEPS[kind],
            deps=deps,
            attached_tags=attached,
            hyper=AdamHyper(lr=lr),
            train_seed=derive_seed(seed, name, "train"),
            init_seed=derive_seed(seed, kind, "init"),
        )
        if overrides and name in overrides:
            over = dict(overrides[name])
            if "dataset" in over:
                over["dataset"] = DatasetSpec(**over["dataset"])
            if "hyper" in over:
                over["hyper"] = AdamHyper(**over["hyper"])
            cfg = replace(cfg, **over)
        return cfg

    stages = [mk("base", "base", "base", (), ())]
    prev = "base"
    attached: tuple[str, ...] = ()
    for tag in shortcuts:
        domain = "finetune" if tag == "sr_lora" else shift_domain
        stages.append(mk(tag, tag, domain, (prev,), attached + (tag,)))
        attached = attached + (tag,)
        prev = tag
    stages.append(mk("adapter", "adapter", adapter_domain, (prev,), attached))
    return RunPlan(preset=preset, seed=seed, stages=stages)


# ---------------------------------------------------------------------------
# stage execution


@dataclass
class _DatasetArrays:
    images: np.ndarray  # (n, 256), standardized flow space
    control_maps: np.ndarray  # (n, 256)
    bg: np.ndarray  # (n, 1)
    captions: list[CaptionTokens]


def _load_arrays(spec: DatasetSpec, cache: dict | None) -> _DatasetArrays:
    key = (spec.domain, spec.count, spec.seed)
    if cache is not None and key in cache:
        return cache[key]
    samples = world.sample_dataset(spec.count, domain=spec.domain, seed=spec.seed)
    arrays = _DatasetArrays(
        images=to_flow(np.stack([s.image.reshape(-1) for s in samples])).astype(np.float32),
        control_maps=np.stack([s.control_map.reshape(-1) for s in samples]).astype(np.float32),
        bg=np.array([[s.factors.bg] for s in samples], dtype=np.float32),
        captions=[s.caption for s in samples],
    )
    if cache is not None:
        cache[key] = arrays
    return arrays


def build_model(stage: StageConfig, store: ParamStore) -> VelocityModel:
    """Instantiate the model and attach every module the stage needs."""
    model = VelocityModel(store, hidden=MODEL_HIDDEN, blocks=MODEL_BLOCKS, init_seed=stage.init_seed)
    wanted = list(stage.attached_tags)
    if stage.kind in ("sr_lora", "sr_cn", "sr_bg", "adapter") and stage.kind not in wanted:
        wanted.append(stage.kind)
    for tag in wanted:
        if tag == "sr_lora":
            attach(model, LoraModule(default_lora_targets(model), init_seed=stage.init_seed))
        elif tag == "sr_cn":
            attach(model, ControlBranch(blocks=MODEL_BLOCKS, model_hidden=MODEL_HIDDEN, init_seed=stage.init_seed))
        elif tag == "sr_bg":
            attach(model, BgModule(blocks=MODEL_BLOCKS, model_hidden=MODEL_HIDDEN, init_seed=stage.init_seed))
        elif tag == "adapter":
            attach(model, AdapterEncoder(model_hidden=MODEL_HIDDEN, blocks=MODEL_BLOCKS, init_seed=stage.init_seed))
        else:
            raise TrainingError(f"cannot attach tag {tag!r}")
    return model


def train_stage(
    stage: StageConfig,
    model: VelocityModel,
    data: _DatasetArrays,
    curve_path: Path | None = None,
    log_every: int = 200,
) -> list[tuple[int, float]]:
    """Run the stage's optimizer steps; returns the (step, loss) curve."""
    store = model.store
    store.freeze_all_except(stage.trainable_tags)
    frozen_tags = [t for t in ("base", *stage.attached_tags) if t not in stage.trainable_tags]
    frozen_before = store.snapshot(tags=frozen_tags)
    n = data.images.shape[0]
    curve: list[tuple[int, float]] = []

    adapter = model.modules.get("adapter") if stage.kind == "adapter" else None
    branch = model.modules.get("sr_cn")
    bg_mod = model.modules.get("sr_bg")

    for step in range(stage.steps):
        rng = stream("train", stage.train_seed, step)
        idx = rng.integers(0, n, size=stage.batch)
        drop = rng.uniform(size=stage.batch) < stage.p_drop
        caps = [
            CaptionTokens() if d else data.captions[i]
            for i, d in zip(idx, drop)
        ]
        x1 = data.images[idx].astype(np.float64)

        adapter_emb = None
        if adapter is not None:
            ref = x1
            if stage.adapter_jitter > 0.0:
                ref = ref + stage.adapter_jitter * rng.standard_normal(ref.shape)
            adapter_emb = adapter.encode(store, Tensor(ref))
        control_feats = None
        if branch is not None:
            control_feats = branch.forward(store, Tensor(data.control_maps[idx].astype(np.float64)))
            scale = 1.0
            if stage.control_anneal > 0:
                fade_start = stage.steps - stage.control_anneal
                if step >= fade_start:
                    scale = 1.0 - (step - fade_start + 1) / stage.control_anneal
            keep = np.full(stage.batch, scale)
            if stage.control_drop > 0.0:
                keep *= rng.uniform(size=stage.batch) >= stage.control_drop
            if not np.all(keep == 1.0):
                control_feats = [
                    T.mul(f, Tensor(np.broadcast_to(keep[:, None], f.shape).copy()))
                    for f in control_feats
                ]
        bg_emb = None
        if bg_mod is not None:
            bg_emb = bg_mod.embed(store, Tensor(data.bg[idx].astype(np.float64)))

        def builder(t):
            return model.embed_condition(
                t, caps, adapter_emb=adapter_emb, control_feats=control_feats, bg_emb=bg_emb
            )

        loss = cfm_loss(model, x1, builder, rng)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite loss at step {step} of stage {stage.name!r}")
        backward(loss)
        hyper = stage.hyper
        if stage.warmup_steps > 0 and step < stage.warmup_steps:
            hyper = replace(hyper, lr=hyper.lr * (step + 1) / stage.warmup_steps)
        elif stage.lr_schedule == "half-cosine" and step >= stage.steps // 2:
            half = max(stage.steps - stage.steps // 2, 1)
            frac = (step - stage.steps // 2) / half
            hyper = replace(hyper, lr=hyper.lr * (0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * frac))))
        adam_step(store, hyper)
        store.zero_grad()
        if step % log_every == 0 or step == stage.steps - 1:
            curve.append((step, value))

    frozen_after = store.snapshot(tags=frozen_tags)
    for name, before in frozen_before.items():
        if not np.array_equal(before, frozen_after[name]):
            raise TrainingError(f"frozen parameter {name!r} changed during stage {stage.name!r}")

    if curve_path is not None:
        curve_path.parent.mkdir(parents=True, exist_ok=True)
        with open(curve_path, "w") as fh:
            fh.write("step,loss\n")
            for step, value in curve:
                fh.write(f"{step},{value:.8g}\n")
    return curve


# ---------------------------------------------------------------------------
# plan execution


def stage_hash(plan: RunPlan, name: str, _memo: dict | None = None) -> str:
    """Content hash of a stage config plus its dependency hashes."""
    memo = _memo if _memo is not None else {}
    if name in memo:
        return memo[name]
    stage = plan.stage(name)
    payload = stage.config_dict()
    payload["deps"] = [stage_hash(plan, d, memo) for d in stage.deps]
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]
    memo[name] = digest
    return digest


def checkpoint_path(workdir: Path, stage: StageConfig, digest: str) -> Path:
    return Path(workdir) / "checkpoints" / f"{stage.name}-{digest}.srat"


def execute(plan: RunPlan, workdir, dataset_cache: dict | None = None, force: bool = False) -> dict:
    """Run every stage of the plan, reusing existing checkpoints.

    A stage is skipped when its checkpoint already exists and none of its
    dependencies reran this call; deleting one checkpoint reruns exactly that
    stage and its dependents. Returns (and writes) the run manifest.
    """
    workdir = Path(workdir)
    (workdir / "checkpoints").mkdir(parents=True, exist_ok=True)
    run_dir = workdir / "runs" / f"{plan.preset}-seed{plan.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)

    memo: dict[str, str] = {}
    reran: set[str] = set()
    manifest = {
        "preset": plan.preset,
        "seed": plan.seed,
        "stages": [],
    }
    for stage in plan.stages:
        digest = stage_hash(plan, stage.name, memo)
        ckpt = checkpoint_path(workdir, stage, digest)
        curve = workdir / "curves" / f"{stage.name}-{digest}.csv"
        dep_reran = any(d in reran for d in stage.deps)
        entry = {
            "name": stage.name,
            "kind": stage.kind,
            "hash": digest,
            "checkpoint": str(ckpt),
            "curve": str(curve),
            "config": stage.config_dict(),
        }
        if ckpt.exists() and not dep_reran and not force:
            entry["reran"] = False
            manifest["stages"].append(entry)
            continue

        t0 = time.monotonic()
        if stage.deps:
            dep = plan.stage(stage.deps[-1])
            dep_ckpt = checkpoint_path(workdir, dep, memo[dep.name])
            if not dep_ckpt.exists():
                raise TrainingError(f"missing dependency checkpoint {dep_ckpt}")
            store = load_checkpoint(dep_ckpt)
        else:
            store = ParamStore()
        model = build_model(stage, store)
        data = _load_arrays(stage.dataset, dataset_cache)
        train_stage(stage, model, data, curve_path=curve)
        save_checkpoint(store, ckpt)
        reran.add(stage.name)
        entry["reran"] = True
        entry["seconds"] = round(time.monotonic() - t0, 3)
        manifest["stages"].append(entry)

    manifest_path = run_dir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    manifest["path"] = str(manifest_path)
    return manifest


def final_checkpoint(manifest: dict) -> Path:
    return Path(manifest["stages"][-1]["checkpoint"])
