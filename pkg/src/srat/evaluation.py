"""Metric suite: identity fidelity, prompt adherence, confounder leakage,
and prior preservation, all measured with analytic probes.

Leakage is the Pearson correlation between a confounder in the adapter's
reference image and the same confounder probed in the generation when the
prompt leaves it unspecified; adherence is the error between the prompted
rotation bucket and the probed rotation. The position metric has no prompt
token, so it is reported as the mean L2 distance between the generated and
reference positions (a position-leakage distance). Prior preservation is a
diagonal Fréchet distance in pixel space between adapter-on and base-model
generations under shared noise seeds and generic prompts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import world
from .adapters import AdapterEncoder, attach
from .generator import SamplerConfig, VelocityModel, sample_batch, to_flow, to_images
from .params import ParamStore, load_checkpoint
from .rng import derive_seed, stream
from .training import MODEL_BLOCKS, MODEL_HIDDEN
from .world import ROT_BUCKETS, UNSPEC, CaptionTokens, Factors, ProbeUndefinedError, probe, rot_bucket_center


class EvalError(RuntimeError):
    pass


@dataclass
class EvalGrid:
    """Reference factor sets with stratified rotations plus sampler settings."""

    seed: int = 0
    domain: str = "base"
    n_refs: int = 64
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.n_refs < 16:
            raise EvalError("need at least 16 references")
        self.references = []
        for i in range(self.n_refs):
            rng = stream("eval-ref", self.seed, i)
            theta = -45.0 + 90.0 * (i + 0.5) / self.n_refs
            self.references.append(
                Factors(
                    shape_class=int(rng.integers(0, 4)),
                    fill=float(rng.uniform(*world.FILL_RANGE)),
                    dx=float(rng.uniform(*world.POS_RANGE)),
                    dy=float(rng.uniform(*world.POS_RANGE)),
                    theta=theta,
                    bg=float(rng.uniform(*world.BG_RANGE)),
                    domain=self.domain,
                )
            )
        buckets = {world.caption_for(f).rot_bucket for f in self.references}
        if len(buckets) < 8:
            raise EvalError("reference rotations must cover >= 8 buckets")
        self.ref_images = to_flow(np.stack([world.render(f).reshape(-1) for f in self.references]))


def pearson(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.size < 2:
        raise EvalError("pearson needs two equal-length sequences of size >= 2")
    xc = xs - xs.mean()
    yc = ys - ys.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise EvalError("undefined correlation: zero variance")
    return float((xc * yc).sum() / denom)


def frechet_diagonal(a: np.ndarray, b: np.ndarray) -> float:
    """Diagonal-Gaussian Fréchet distance between two sample sets (N, D)."""
    if a.shape != b.shape:
        raise EvalError(f"arm size mismatch: {a.shape} vs {b.shape}")
    mu1, mu2 = a.mean(axis=0), b.mean(axis=0)
    v1, v2 = a.var(axis=0), b.var(axis=0)
    return float(((mu1 - mu2) ** 2).sum() + (v1 + v2 - 2.0 * np.sqrt(v1 * v2)).sum())


@dataclass
class MetricsReport:
    preset: str
    seed: int
    identity_acc: float
    fill_err: float
    rot_adherence_err: float
    pos_adherence_err: float
    rot_leakage_corr: float
    bright_leakage_corr: float
    prior_fd: float
    adherence_undefined: int
    leakage_undefined: int
    adherence_cells: int
    leakage_cells: int
    records: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("rot_leakage_corr", "bright_leakage_corr"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise EvalError(f"{name} outside [-1, 1]")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)

    @staticmethod
    def csv_header() -> list[str]:
        return [
            "preset", "seed", "identity_acc", "fill_err", "rot_adherence_err",
            "pos_adherence_err", "rot_leakage_corr", "bright_leakage_corr",
            "prior_fd", "adherence_undefined", "leakage_undefined",
        ]

    def csv_row(self) -> list:
        return [getattr(self, c) for c in self.csv_header()]


def write_csv(reports: list[MetricsReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricsReport.csv_header())
        for rep in reports:
            writer.writerow(rep.csv_row())


# ---------------------------------------------------------------------------
# generation helpers


def _generate(model, captions, grid: EvalGrid, purpose: str, ref_images=None):
    config = SamplerConfig(
        steps=grid.sampler.steps,
        cfg_scale=grid.sampler.cfg_scale,
        ip_scale=grid.sampler.ip_scale,
        seed=derive_seed(grid.seed, purpose),
    )
    raw = sample_batch(model, captions, config, adapter_images=ref_images)
    return to_images(raw)


def _probe_all(images):
    """Probe every image; returns (results, undefined_count); None on failure."""
    results = []
    undefined = 0
    for img in images:
        try:
            results.append(probe(img))
        except ProbeUndefinedError:
            results.append(None)
            undefined += 1
    return results, undefined


# ---------------------------------------------------------------------------
# metrics


def eval_adherence_identity(model: VelocityModel, grid: EvalGrid) -> dict:
    """Adherence + identity over the (reference x rotation-bucket) grid."""
    refs = grid.references
    captions, ref_rows = [], []
    for bucket in range(ROT_BUCKETS):
        for i, f in enumerate(refs):
            captions.append(CaptionTokens(rot_bucket=bucket, bright_bucket=UNSPEC))
            ref_rows.append(i)
    ref_images = grid.ref_images[ref_rows]
    images = _generate(model, captions, grid, "adherence", ref_images)
    results, undefined = _probe_all(images)

    rot_errs, pos_errs, id_hits, fill_errs = [], [], [], []
    for cap, row, res in zip(captions, ref_rows, results):
        if res is None:
            continue
        ref = refs[row]
        rot_errs.append(abs(res.theta - rot_bucket_center(cap.rot_bucket)))
        pos_errs.append(float(np.hypot(res.dx - ref.dx, res.dy - ref.dy)))
        id_hits.append(res.shape_class == ref.shape_class)
        if np.isfinite(res.fill):  # marker-class matches carry no fill
            fill_errs.append(abs(res.fill - ref.fill))
    if not rot_errs:
        raise EvalError("no valid probe results on the adherence grid")
    return {
        "rot_adherence_err": float(np.mean(rot_errs)),
        "pos_adherence_err": float(np.mean(pos_errs)),
        "identity_acc": float(np.mean(id_hits)),
        "fill_err": float(np.mean(fill_errs)) if fill_errs else float("nan"),
        "undefined": undefined,
        "cells": len(captions),
    }


def eval_leakage(model: VelocityModel, grid: EvalGrid) -> dict:
    """Leakage correlations with both prompt tokens left unspecified."""
    captions = [CaptionTokens()] * grid.n_refs
    images = _generate(model, captions, grid, "leakage", grid.ref_images)
    results, undefined = _probe_all(images)
    ref_theta, gen_theta, ref_bg, gen_bg = [], [], [], []
    for f, res in zip(grid.references, results):
        if res is None:
            continue
        ref_theta.append(f.theta)
        gen_theta.append(res.theta)
        ref_bg.append(f.bg)
        gen_bg.append(res.bg)
    if len(gen_theta) < 16:
        raise EvalError(f"insufficient data: only {len(gen_theta)} valid probes")
    return {
        "rot_leakage_corr": pearson(ref_theta, gen_theta),
        "bright_leakage_corr": pearson(ref_bg, gen_bg),
        "undefined": undefined,
        "cells": grid.n_refs,
    }


def eval_prior(adapter_model: VelocityModel, base_model: VelocityModel, grid: EvalGrid, n: int = 512) -> float:
    """Diagonal Fréchet distance between adapter-on and base generations."""
    captions = [
        CaptionTokens(rot_bucket=UNSPEC, bright_bucket=UNSPEC) for _ in range(n)
    ]
    ref_images = grid.ref_images[np.arange(n) % grid.n_refs]
    gen_adapter = _generate(adapter_model, captions, grid, "prior", ref_images)
    gen_base = _generate(base_model, captions, grid, "prior")
    return frechet_diagonal(
        gen_adapter.reshape(n, -1).astype(np.float64),
        gen_base.reshape(n, -1).astype(np.float64),
    )


# ---------------------------------------------------------------------------
# full run evaluation


def _load_eval_model(ckpt_path, tags) -> VelocityModel:
    store = load_checkpoint(ckpt_path, tags=tags)
    model = VelocityModel(store, hidden=MODEL_HIDDEN, blocks=MODEL_BLOCKS)
    if "adapter" in tags and store.names("adapter"):
        attach(model, AdapterEncoder(model_hidden=MODEL_HIDDEN, blocks=MODEL_BLOCKS))
    store.freeze_all_except([])
    return model


def evaluate_run(manifest: dict, grid: EvalGrid | None = None, prior_n: int = 512) -> MetricsReport:
    """Evaluate a completed run; shortcuts stay detached (and asserted so)."""
    final = manifest["stages"][-1]
    adapter_cfg = final["config"]
    if grid is None:
        grid = EvalGrid(seed=manifest["seed"], domain=adapter_cfg["dataset"][0])
    model = _load_eval_model(final["checkpoint"], tags=("base", "adapter"))
    base_model = _load_eval_model(final["checkpoint"], tags=("base",))

    model.store.start_access_log()
    adh = eval_adherence_identity(model, grid)
    leak = eval_leakage(model, grid)
    touched = set(model.store.stop_access_log())
    bad = {n for n in touched if model.store.tag_of(n) not in ("base", "adapter")}
    if bad:
        raise EvalError(f"inference touched shortcut parameters: {sorted(bad)}")

    fd = eval_prior(model, base_model, grid, n=prior_n)
    return MetricsReport(
        preset=manifest["preset"],
        seed=manifest["seed"],
        identity_acc=adh["identity_acc"],
        fill_err=adh["fill_err"],
        rot_adherence_err=adh["rot_adherence_err"],
        pos_adherence_err=adh["pos_adherence_err"],
        rot_leakage_corr=leak["rot_leakage_corr"],
        bright_leakage_corr=leak["bright_leakage_corr"],
        prior_fd=fd,
        adherence_undefined=adh["undefined"],
        leakage_undefined=leak["undefined"],
        adherence_cells=adh["cells"],
        leakage_cells=leak["cells"],
    )
