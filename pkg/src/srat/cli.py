"""Command-line interface: data generation, pipelines, sampling, evaluation.

Exit codes: 0 success, 2 usage/config error, 3 numerical failure, 4 IO error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import world
from .adapters import AdapterEncoder, attach
from .evaluation import EvalError, EvalGrid, MetricsReport, evaluate_run, pearson
from .generator import SamplerConfig, VelocityModel, oracle_velocity, sample_batch, sample_flow, to_flow, to_images
from .linear_oracle import documented_world, solve_gd, solve_sr, solve_vanilla
from .params import load_checkpoint
from .rng import stream
from .tensor import NonFiniteError
from .training import MODEL_BLOCKS, MODEL_HIDDEN, PRESETS, TrainingError, build_run_plan, execute
from .world import UNSPEC, CaptionTokens, ProbeUndefinedError, WorldError, probe


class UsageError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run config


DEFAULT_CONFIG = {
    "preset": "vanilla",
    "seeds": [0],
    "outdir": "runs",
    "adapter_domain": None,
    "stage_overrides": {},
    "sampler": {"steps": 28, "cfg_scale": 3.5, "ip_scale": 1.0},
    "eval": {"n_refs": 64, "prior_n": 512},
}

_STAGE_OVERRIDE_KEYS = {"steps", "lr", "batch", "dataset_count", "p_drop", "lr_schedule", "control_drop", "control_anneal"}


def validate_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(raw) - set(DEFAULT_CONFIG)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    cfg.update(raw)
    if cfg["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}")
    if not isinstance(cfg["seeds"], list) or not all(isinstance(s, int) for s in cfg["seeds"]):
        raise UsageError("seeds must be a list of integers")
    if cfg["adapter_domain"] not in (None, "base", "finetune"):
        raise UsageError("adapter_domain must be null, 'base', or 'finetune'")
    for stage, over in cfg["stage_overrides"].items():
        unknown = set(over) - _STAGE_OVERRIDE_KEYS
        if unknown:
            raise UsageError(f"unknown stage override keys for {stage!r}: {sorted(unknown)}")
    for section, allowed in (("sampler", {"steps", "cfg_scale", "ip_scale"}),
                             ("eval", {"n_refs", "prior_n"})):
        unknown = set(cfg[section]) - allowed
        if unknown:
            raise UsageError(f"unknown {section} keys: {sorted(unknown)}")
    return cfg


def load_config(path: str | None) -> dict:
    if path is None:
        return json.loads(json.dumps(DEFAULT_CONFIG))
    with open(path) as fh:
        return validate_config(json.load(fh))


def _plan_overrides(cfg: dict, plan_stages) -> dict:
    overrides = {}
    for stage in plan_stages:
        over = cfg["stage_overrides"].get(stage.name)
        if not over:
            continue
        out = {}
        if "steps" in over:
            out["steps"] = int(over["steps"])
        if "batch" in over:
            out["batch"] = int(over["batch"])
        if "p_drop" in over:
            out["p_drop"] = float(over["p_drop"])
        if "lr_schedule" in over:
            out["lr_schedule"] = str(over["lr_schedule"])
        if "control_drop" in over:
            out["control_drop"] = float(over["control_drop"])
        if "control_anneal" in over:
            out["control_anneal"] = int(over["control_anneal"])
        if "lr" in over:
            out["hyper"] = {"lr": float(over["lr"])}
        if "dataset_count" in over:
            out["dataset"] = {
                "domain": stage.dataset.domain,
                "count": int(over["dataset_count"]),
                "seed": stage.dataset.seed,
            }
        overrides[stage.name] = out
    return overrides


def _grid_hash(grid: EvalGrid) -> str:
    payload = {
        "seed": grid.seed, "domain": grid.domain, "n_refs": grid.n_refs,
        "sampler": asdict(grid.sampler),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.count <= 0:
        raise UsageError("count must be positive")
    samples = world.sample_dataset(args.count, domain=args.domain, seed=args.seed)
    world.save_dataset(samples, args.out, domain=args.domain, seed=args.seed)
    thetas = [s.factors.theta for s in samples]
    print(f"wrote {args.count} {args.domain}-domain samples to {args.out}")
    print(f"theta mean {np.mean(thetas):.3f} std {np.std(thetas):.3f}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    preset = args.preset or cfg["preset"]
    seeds = [args.seed] if args.seed is not None else cfg["seeds"]
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}")
    cache: dict = {}
    for seed in seeds:
        base_plan = build_run_plan(preset, seed=seed, adapter_domain=cfg["adapter_domain"])
        plan = build_run_plan(
            preset, seed=seed,
            overrides=_plan_overrides(cfg, base_plan.stages),
            adapter_domain=cfg["adapter_domain"],
        )
        manifest = execute(plan, cfg["outdir"], dataset_cache=cache)
        print(f"{preset} seed {seed}: manifest at {manifest['path']}")
    return 0


def _parse_bucket(value: str, upper: int, name: str) -> int:
    bucket = int(value)
    if bucket == UNSPEC:
        return UNSPEC
    if not 0 <= bucket < upper:
        raise UsageError(f"{name} bucket {bucket} out of range [0, {upper}) or -1")
    return bucket


def cmd_sample(args) -> int:
    store = load_checkpoint(args.checkpoint)
    model = VelocityModel(store, hidden=MODEL_HIDDEN, blocks=MODEL_BLOCKS)
    has_adapter = bool(store.names("adapter"))
    if has_adapter:
        attach(model, AdapterEncoder(model_hidden=MODEL_HIDDEN, blocks=MODEL_BLOCKS))
    store.freeze_all_except([])
    # shortcut parameters, if present in the checkpoint, stay unused: only
    # base and adapter modules are wired into the forward pass here
    if has_adapter and args.reference is None and args.ip_scale != 0.0:
        raise UsageError("checkpoint has an adapter: pass --reference or --ip-scale 0")

    caption = CaptionTokens(
        rot_bucket=_parse_bucket(args.rot_bucket, world.ROT_BUCKETS, "rot"),
        bright_bucket=_parse_bucket(args.bright_bucket, world.BRIGHT_BUCKETS, "bright"),
    )
    refs = None
    if args.reference is not None:
        ref_samples = world.load_dataset(args.reference)
        if not 0 <= args.ref_index < len(ref_samples):
            raise UsageError(f"--ref-index out of range for {args.reference}")
        ref = to_flow(ref_samples[args.ref_index].image.reshape(-1))
        refs = np.tile(ref, (args.n, 1))

    config = SamplerConfig(steps=args.steps, cfg_scale=args.cfg_scale,
                           ip_scale=args.ip_scale, seed=args.seed)
    images = to_images(sample_batch(model, [caption] * args.n, config, adapter_images=refs))

    cols = int(np.ceil(np.sqrt(args.n)))
    rows = int(np.ceil(args.n / cols))
    sheet = np.zeros((rows * world.SIZE, cols * world.SIZE))
    sidecar = []
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        sheet[r * world.SIZE:(r + 1) * world.SIZE, c * world.SIZE:(c + 1) * world.SIZE] = img
        try:
            res = probe(img)
            sidecar.append({
                "index": i, "shape_class": res.shape_class, "fill": res.fill,
                "dx": res.dx, "dy": res.dy, "theta": res.theta, "bg": res.bg,
            })
        except ProbeUndefinedError:
            sidecar.append({"index": i, "probe_undefined": True})
    out = Path(args.grid_out)
    world.write_pgm(sheet, out)
    with open(out.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)
    print(f"wrote {args.n} samples to {out} (+ probe sidecar)")
    return 0


def _load_grid(args, manifest: dict) -> EvalGrid:
    spec = {}
    if args.grid_config:
        with open(args.grid_config) as fh:
            spec = json.load(fh)
        unknown = set(spec) - {"seed", "domain", "n_refs", "sampler"}
        if unknown:
            raise UsageError(f"unknown grid config keys: {sorted(unknown)}")
    sampler = SamplerConfig(**spec.get("sampler", {}))
    return EvalGrid(
        seed=spec.get("seed", manifest["seed"]),
        domain=spec.get("domain", manifest["stages"][-1]["config"]["dataset"][0]),
        n_refs=spec.get("n_refs", 64),
        sampler=sampler,
    )


def cmd_eval(args) -> int:
    with open(args.run_manifest) as fh:
        manifest = json.load(fh)
    grid = _load_grid(args, manifest)
    report = evaluate_run(manifest, grid=grid, prior_n=args.prior_n)
    payload = asdict(report)
    payload["grid_hash"] = _grid_hash(grid)
    with open(args.report_out, "w") as fh:
        json.dump(payload, fh, indent=2)
    print(f"{report.preset} seed {report.seed}: "
          f"rot_leak {report.rot_leakage_corr:.3f} "
          f"rot_adh {report.rot_adherence_err:.2f} "
          f"id_acc {report.identity_acc:.3f} prior_fd {report.prior_fd:.4f}")
    return 0


def cmd_report(args) -> int:
    reports = []
    for path in args.runs:
        with open(path) as fh:
            reports.append(json.load(fh))
    by_preset: dict[str, list[dict]] = {}
    for rep in reports:
        by_preset.setdefault(rep["preset"], []).append(rep)
    for preset, reps in by_preset.items():
        hashes = {r.get("grid_hash") for r in reps}
        if len(hashes) > 1:
            raise UsageError(f"incompatible reports for preset {preset!r}: grid hashes {sorted(hashes)}")
    columns = MetricsReport.csv_header()
    with open(args.csv_out, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for rep in reports:
            fh.write(",".join(str(rep[c]) for c in columns) + "\n")
        for preset, reps in sorted(by_preset.items()):
            means = [
                f"{np.mean([r[c] for r in reps]):.6g}" if c not in ("preset", "seed") else
                (preset if c == "preset" else "mean")
                for c in columns
            ]
            fh.write(",".join(means) + "\n")
    print(f"wrote {len(reports)} rows (+{len(by_preset)} mean rows) to {args.csv_out}")
    return 0


# ---------------------------------------------------------------------------
# self tests


def _selftest_gradcheck() -> float:
    from . import tensor as T
    from .params import ParamStore
    from .tensor import Tensor

    worst = 0.0
    rng = np.random.default_rng(0)

    def check(fn, x):
        nonlocal worst
        worst = max(worst, T.grad_check(fn, x))

    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 5)))
    check(lambda t: T.tensor_sum(T.matmul(t, b)), a)
    check(lambda t: T.mse_loss(T.silu(t), Tensor(np.ones((3, 4)))), a)
    check(lambda t: T.tensor_sum(T.mul(T.tanh(t), t)), a)
    check(lambda t: T.mean(T.concat([t, T.scale(t, 2.0)], axis=1)), a)

    store = ParamStore()
    model = VelocityModel(store, data_dim=6, hidden=8, blocks=2, init_seed=3)
    # make the modulation path live so token gradients are nonzero
    store.get("base.block0.mod_scale.w").data[:] = rng.normal(0, 0.3, (48, 8))
    x1 = rng.normal(size=(3, 6))
    x0 = rng.normal(size=(3, 6))
    t = rng.uniform(0, 1, 3)
    xt = (1 - t[:, None]) * x0 + t[:, None] * x1
    caps = [CaptionTokens(2, 1)] * 3

    def loss_with(name):
        def fn(tt):
            entry = store.entries[name]
            old = entry.tensor
            entry.tensor = tt
            try:
                from . import tensor as TT
                pred = model.forward(Tensor(xt), model.embed_condition(t, caps))
                return TT.mse_loss(pred, Tensor(x1 - x0))
            finally:
                entry.tensor = old
        return fn

    for name in ("base.in.w", "base.block0.mod_scale.w", "base.block1.fc2.w",
                 "base.tok_rot", "base.out.b"):
        check(loss_with(name), store.get(name))
    return worst


def _selftest_sampler() -> float:
    rng = np.random.default_rng(0)
    x1 = rng.normal(size=(4, 8))
    x0 = rng.normal(size=(4, 8))
    worst = 0.0
    for steps in (1, 7, 28):
        out = sample_flow(lambda x, t: oracle_velocity(x, t, x1), x0, steps)
        worst = max(worst, float(np.abs(out - x1).max()))
    return worst


def _selftest_probes() -> float:
    worst = 0.0
    for domain in ("base", "finetune"):
        for i in range(100):
            factors = world.sample_factors(99, i, domain)
            res = probe(world.render(factors))
            if res.shape_class != factors.shape_class:
                raise NumericalError(f"probe misclassified sample {i} ({domain})")
            worst = max(worst, abs(res.theta - factors.theta))
    return worst


def _selftest_linear() -> float:
    w0, p0 = documented_world(sigma=0.0)
    theorem = solve_sr(w0, p0, w0.M_C, ridge=1e-8).leak_norm
    if theorem >= 1e-10:
        raise NumericalError(f"exact-zero theorem violated: {theorem}")
    w, p = documented_world()
    x, _, c = w.sample(50000, seed=0)
    van = solve_vanilla(w, p, samples=(x, c))
    sr = solve_sr(w, p, w.M_C, samples=(x, c))
    if not (sr.leak_norm < 0.05 < 0.5 < van.leak_norm):
        raise NumericalError(f"leak norms out of range: sr {sr.leak_norm}, vanilla {van.leak_norm}")
    gd = solve_gd(w, p, S=w.M_C, samples=(x, c))
    return abs(gd.leak_norm - sr.leak_norm)


def cmd_selftest(args) -> int:
    suites = {
        "gradcheck": (_selftest_gradcheck, 1e-4),
        "sampler": (_selftest_sampler, 1e-9),
        "probes": (_selftest_probes, 5.0),
        "linear": (_selftest_linear, 1e-4),
    }
    fn, bound = suites[args.suite]
    worst = fn()
    print(f"{args.suite}: max observed error {worst:.3e} (bound {bound:g})")
    if worst >= bound:
        raise NumericalError(f"{args.suite} failed: {worst} >= {bound}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset file")
    p.add_argument("--domain", choices=("base", "finetune"), default="base")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pipeline", help="run a training preset")
    p.add_argument("--config")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--seed", type=int)
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sample", help="generate a contact sheet from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rot-bucket", default="-1")
    p.add_argument("--bright-bucket", default="-1")
    p.add_argument("--reference", help="SRATD1 dataset file providing the reference image")
    p.add_argument("--ref-index", type=int, default=0)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--steps", type=int, default=28)
    p.add_argument("--cfg-scale", type=float, default=3.5)
    p.add_argument("--ip-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a completed run")
    p.add_argument("--run-manifest", required=True)
    p.add_argument("--grid-config")
    p.add_argument("--prior-n", type=int, default=512)
    p.add_argument("--report-out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge eval reports into a CSV table")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--csv-out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run an invariant suite")
    p.add_argument("--suite", choices=("gradcheck", "sampler", "probes", "linear"), required=True)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("SRAT_THREADS")
    if threads is not None:
        try:
            if int(threads) < 1:
                raise ValueError
        except ValueError:
            print(f"error: SRAT_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
            return 2
    args = build_parser().parse_args(argv)
    if getattr(args, "print_config", False):
        print(json.dumps(DEFAULT_CONFIG, indent=2))
        return 0
    try:
        return args.func(args)
    except (UsageError, TrainingError, WorldError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, NonFiniteError, EvalError, ProbeUndefinedError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main(argv=None))
