"""Command-line interface.

Subcommands: train-flow, finetune-dmf, sample, eval, oracle-check,
proposal-dump.  Exit codes: 0 success, 1 usage error, 2 config schema
error, 3 runtime failure.

Configs are JSON with sections {dataset, net, train, guidance, sampler,
eval, seed, output_dir}; ``train`` holds ``warmup`` and ``finetune``
stage blocks.  Missing keys take defaults, unknown keys are rejected,
and command-line flags override file values.  The merged effective
config is written next to the outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import Optional

import numpy as np

from .bench import DatasetSpec, compute_metrics, config_digest, emit_report, sample_dataset
from .net import ARCH_FLOW, NetConfig
from .numerics import rng_fork
from .objective import GuidanceConfig, LossConfig
from .oracle import (
    GaussianSpec,
    discretization_error,
    gaussian_average_velocity,
    gaussian_transport,
    gaussian_velocity,
    gmm_velocity,
    reference_ode,
)
from .process import (
    RECTIFIED_FLOW,
    TimeProposal,
    order_stat_densities,
    proposal_density_table,
)
from .sampler import FnEval, SamplerConfig, generate, score_from_velocity, step_ctm, step_map_euler
from .trainer import TrainConfig, load_checkpoint, run_stage


class ConfigError(Exception):
    """Config file violates the schema."""


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want exit code 1
        raise _UsageError(message)


_GUIDANCE_DEFAULTS = {"omega": 0.0, "interval": [0.0, 1.0], "class_dropout": 0.1}
_PROPOSAL_DEFAULTS = {"mu_fm": 0.0, "mu1": 0.4, "mu2": -1.2}
_LOSS_DEFAULTS = {"family": "adaptive-cauchy", "c": 1.0}
_STAGE_DEFAULTS = {
    "steps": 1000,
    "batch_size": 256,
    "lr": 1e-4,
    "betas": [0.9, 0.95],
    "eps": 1e-8,
    "weight_decay": 0.0,
    "ema_decay": 0.9999,
    "split": 0,
    "guidance": None,  # filled from the top-level guidance section
    "proposal": dict(_PROPOSAL_DEFAULTS),
    "loss": dict(_LOSS_DEFAULTS),
}

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/out",
    "dataset": {
        "kind": "gmm-ring",
        "mean": [0.0, 0.0],
        "scale": 1.0,
        "modes": 8,
        "radius": 4.0,
        "mode_scale": 0.3,
        "noise": 0.1,
        "labeled": True,
    },
    "net": {
        "input_dim": 2,
        "width": 64,
        "depth": 6,
        "arch": ARCH_FLOW,
        "split": 0,
        "num_classes": None,  # None: taken from the dataset
        "attention": False,
        "qk_norm": False,
        "time_embed_dim": 0,
        "mlp_ratio": 2,
        "tokens": 4,
    },
    "train": {
        "warmup": dict(_STAGE_DEFAULTS),
        "finetune": dict(_STAGE_DEFAULTS),
    },
    "guidance": dict(_GUIDANCE_DEFAULTS),
    "sampler": {
        "kind": "flow-euler",
        "steps": 32,
        "shift": 1.0,
        "gamma": 0.0,
        "cfg_scale": 1.0,
        "cfg_interval": [0.0, 1.0],
        "noise_scale": "t",
    },
    "eval": {"n": 10000, "n_projections": 128, "use_ema": True, "labels": "uniform"},
}


def _merge(defaults, given, path="config"):
    """Defaults overlaid with ``given``; unknown or mistyped keys fail."""
    if given is None:
        return json.loads(json.dumps(defaults))
    if not isinstance(given, dict):
        raise ConfigError(f"{path} must be an object, got {type(given).__name__}")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    out = {}
    for key, dval in defaults.items():
        if key not in given:
            out[key] = json.loads(json.dumps(dval))
        elif isinstance(dval, dict):
            out[key] = _merge(dval, given[key], f"{path}.{key}")
        else:
            out[key] = given[key]
    return out


def load_config(path: Optional[str]) -> dict:
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}")
    cfg = _merge(DEFAULT_CONFIG, raw)
    for stage in ("warmup", "finetune"):
        if cfg["train"][stage]["guidance"] is None:
            if stage == "finetune":
                cfg["train"][stage]["guidance"] = dict(cfg["guidance"])
            else:
                # warm-up regresses plain velocities; only label dropout carries over
                cfg["train"][stage]["guidance"] = {
                    **_GUIDANCE_DEFAULTS,
                    "class_dropout": cfg["guidance"]["class_dropout"],
                }
        else:
            cfg["train"][stage]["guidance"] = _merge(
                _GUIDANCE_DEFAULTS,
                cfg["train"][stage]["guidance"],
                f"config.train.{stage}.guidance",
            )
    return cfg


def _build_dataset(cfg: dict) -> DatasetSpec:
    d = cfg["dataset"]
    try:
        return DatasetSpec(
            kind=d["kind"],
            mean=tuple(d["mean"]),
            scale=d["scale"],
            modes=d["modes"],
            radius=d["radius"],
            mode_scale=d["mode_scale"],
            noise=d["noise"],
            labeled=d["labeled"],
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(f"config.dataset: {e}")


def _build_net(cfg: dict, data: DatasetSpec) -> NetConfig:
    n = dict(cfg["net"])
    if n["num_classes"] is None:
        n["num_classes"] = max(1, data.num_classes)
    try:
        return NetConfig(**n)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"config.net: {e}")


def _build_stage(cfg: dict, stage_key: str, stage_name: str, seed: int) -> TrainConfig:
    s = cfg["train"][stage_key]
    try:
        return TrainConfig(
            stage=stage_name,
            steps=s["steps"],
            batch_size=s["batch_size"],
            lr=s["lr"],
            betas=tuple(s["betas"]),
            eps=s["eps"],
            weight_decay=s["weight_decay"],
            ema_decay=s["ema_decay"],
            seed=seed,
            split=s["split"],
            guidance=GuidanceConfig(
                omega=s["guidance"]["omega"],
                interval=tuple(s["guidance"]["interval"]),
                class_dropout=s["guidance"]["class_dropout"],
            ),
            proposal=TimeProposal(**s["proposal"]),
            loss=LossConfig(**s["loss"]),
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(f"config.train.{stage_key}: {e}")


def _build_sampler(cfg: dict) -> SamplerConfig:
    s = cfg["sampler"]
    try:
        return SamplerConfig(
            kind=s["kind"],
            steps=s["steps"],
            shift=s["shift"],
            gamma=s["gamma"],
            cfg_scale=s["cfg_scale"],
            cfg_interval=tuple(s["cfg_interval"]),
            noise_scale=s["noise_scale"],
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(f"config.sampler: {e}")


def _write_effective(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _labels_for(policy: str, n: int, num_classes: int, rng) -> Optional[np.ndarray]:
    if policy == "none":
        return None
    if policy == "uniform":
        return rng.integers(0, num_classes, (n,)).astype(np.int64)
    if policy.startswith("fixed:"):
        k = int(policy.split(":", 1)[1])
        if not 0 <= k < num_classes:
            raise ConfigError(f"fixed label {k} outside [0, {num_classes})")
        return np.full(n, k, dtype=np.int64)
    raise ConfigError(f"unknown label policy {policy!r}")


# ----------------------------------------------------------------- commands


def _cmd_train_flow(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.steps is not None:
        cfg["train"]["warmup"]["steps"] = args.steps
    if args.batch_size is not None:
        cfg["train"]["warmup"]["batch_size"] = args.batch_size
    if args.lr is not None:
        cfg["train"]["warmup"]["lr"] = args.lr
    if args.out is not None:
        cfg["output_dir"] = args.out
    data = _build_dataset(cfg)
    net_cfg = _build_net(cfg, data)
    train_cfg = _build_stage(cfg, "warmup", "flow-warmup", cfg["seed"])
    out_dir = os.path.join(cfg["output_dir"], "flow")
    _write_effective(cfg, cfg["output_dir"])
    ckpt = run_stage(train_cfg, data, net_cfg=net_cfg, out_dir=out_dir)
    print(f"trained flow model for {ckpt.step} steps ({ckpt.rejected} rejected)")
    print(f"checkpoint: {os.path.join(out_dir, 'checkpoint.bin')}")
    return 0


def _cmd_finetune_dmf(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.steps is not None:
        cfg["train"]["finetune"]["steps"] = args.steps
    if args.split is not None:
        cfg["train"]["finetune"]["split"] = args.split
    if args.out is not None:
        cfg["output_dir"] = args.out
    data = _build_dataset(cfg)
    stage_name = "decoder-finetune" if args.decoder_only else "map-finetune"
    train_cfg = _build_stage(cfg, "finetune", stage_name, cfg["seed"])
    init = load_checkpoint(args.init)
    out_dir = os.path.join(cfg["output_dir"], "dmf")
    _write_effective(cfg, cfg["output_dir"])
    ckpt = run_stage(train_cfg, data, init=init, out_dir=out_dir)
    print(
        f"fine-tuned {ckpt.net_cfg.arch} (split {ckpt.net_cfg.split}) "
        f"for {ckpt.step} steps ({ckpt.rejected} rejected)"
    )
    print(f"checkpoint: {os.path.join(out_dir, 'checkpoint.bin')}")
    return 0


def _sampler_overrides(args, cfg: dict) -> None:
    for key in ("kind", "steps", "shift", "gamma", "cfg_scale"):
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            cfg["sampler"][key] = val


def _cmd_sample(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    _sampler_overrides(args, cfg)
    ckpt = load_checkpoint(args.ckpt)
    sampler_cfg = _build_sampler(cfg)
    use_ema = cfg["eval"]["use_ema"] and not args.raw_weights
    params = ckpt.eval_params(use_ema=use_ema)
    rng = rng_fork(cfg["seed"], "sample")
    labels = _labels_for(
        args.labels, args.n, ckpt.net_cfg.num_classes, rng.child("labels")
    )
    started = time.monotonic()
    result = generate(
        params,
        ckpt.net_cfg,
        sampler_cfg,
        args.n,
        rng,
        y=labels,
        return_trajectory=args.traj is not None,
    )
    wall = time.monotonic() - started
    cols = [result.x]
    header = "x0,x1"
    if labels is not None:
        cols.append(labels[:, None].astype(np.float64))
        header += ",label"
    np.savetxt(
        args.out, np.concatenate(cols, axis=1), delimiter=",", header=header, comments=""
    )
    if args.traj is not None:
        steps, n, _ = result.trajectory.shape
        idx = np.broadcast_to(np.arange(steps)[:, None], (steps, n)).reshape(-1, 1)
        sample_idx = np.broadcast_to(np.arange(n)[None, :], (steps, n)).reshape(-1, 1)
        flat = result.trajectory.reshape(steps * n, -1)
        np.savetxt(
            args.traj,
            np.concatenate([idx, sample_idx, flat], axis=1),
            delimiter=",",
            header="step,sample,x0,x1",
            comments="",
        )
    print(f"wrote {args.n} samples to {args.out} (NFE {result.nfe}, {wall:.2f}s)")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    _sampler_overrides(args, cfg)
    ckpt = load_checkpoint(args.ckpt)
    data = _build_dataset(cfg)
    sampler_cfg = _build_sampler(cfg)
    n = cfg["eval"]["n"]
    use_ema = cfg["eval"]["use_ema"] and not args.raw_weights
    params = ckpt.eval_params(use_ema=use_ema)
    rng = rng_fork(cfg["seed"], "eval")
    labels = _labels_for(
        cfg["eval"]["labels"], n, ckpt.net_cfg.num_classes, rng.child("labels")
    )
    started = time.monotonic()
    result = generate(params, ckpt.net_cfg, sampler_cfg, n, rng.child("gen"), y=labels)
    wall = time.monotonic() - started
    ref, _ = sample_dataset(data, n, rng.child("ref"))
    report = compute_metrics(
        result.x,
        ref,
        rng.child("metrics"),
        gmm=data.gmm(),
        nfe=result.nfe,
        wall_time=wall,
        n_projections=cfg["eval"]["n_projections"],
    )
    payload = emit_report(args.report, report, cfg, cfg["seed"])
    print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


def _oracle_checks() -> list[tuple[str, bool, str]]:
    """Deterministic closed-form identity checks; no training involved."""
    checks: list[tuple[str, bool, str]] = []
    rng = rng_fork(0, "oracle-check")
    spec = GaussianSpec(mean=(2.0, -1.0), scale=0.5)
    x = rng.normal((8, 2)) * 2.0

    ode_x, _ = reference_ode(lambda xx, tt: gaussian_velocity(xx, tt, spec), x, 0.9, 0.2, 1e-10)
    exact = gaussian_transport(x, 0.9, 0.2, spec)
    err = float(np.max(np.abs(ode_x - exact)))
    checks.append(("transport matches reference ODE", err < 1e-7, f"max abs err {err:.2e}"))

    mid = gaussian_transport(x, 0.9, 0.5, spec)
    two_hop = gaussian_transport(mid, 0.5, 0.2, spec)
    err = float(np.max(np.abs(two_hop - exact)))
    checks.append(("transport semigroup property", err < 1e-12, f"max abs err {err:.2e}"))

    u = gaussian_average_velocity(x, 0.9, 0.2, spec)
    rep = discretization_error(u, lambda xx, tt: gaussian_velocity(xx, tt, spec), x, 0.9, 0.2)
    checks.append(
        ("oracle average velocity reaches quadrature floor", rep.err <= 100 * rep.tol, f"err {rep.err:.2e}")
    )

    rep0 = discretization_error(u, lambda xx, tt: gaussian_velocity(xx, tt, spec), x, 0.7, 0.7)
    checks.append(("one-jump error vanishes at r = t", rep0.err == 0.0, f"err {rep0.err}"))

    v1 = gaussian_velocity(x, 1.0, spec)
    s1 = score_from_velocity(v1, x, 1.0)
    err = float(np.max(np.abs(s1 + x)))
    checks.append(("score at t = 1 equals -x", err < 1e-12, f"max abs err {err:.2e}"))

    ring = DatasetSpec(kind="gmm-ring", modes=8, radius=4.0, mode_scale=0.3).gmm()
    vg = gmm_velocity(x, 1.0, ring)
    err = float(np.max(np.abs(vg - (x - np.mean(np.asarray(ring.means), axis=0)))))
    checks.append(("mixture velocity at t = 1 is x - mean", err < 1e-9, f"max abs err {err:.2e}"))

    z = (np.arange(20000) + 0.5) / 20000
    f_max, f_min = order_stat_densities(z, 0.4, -1.2)
    imax, imin = float(np.mean(f_max)), float(np.mean(f_min))
    ok = abs(imax - 1.0) < 1e-5 and abs(imin - 1.0) < 1e-5
    checks.append(("proposal densities integrate to 1", ok, f"{imax:.6f}, {imin:.6f}"))

    def u_fn(xx, tt, rr):
        return gaussian_average_velocity(xx, tt, rr, spec)

    grid_rng = rng_fork(7, "oracle-check/samplers")
    x0 = grid_rng.normal((16, 2))
    a = step_ctm(FnEval(u_fn), x0, 1.0, 0.25, 0.0, grid_rng.child("a"), RECTIFIED_FLOW)
    b = step_map_euler(FnEval(u_fn), x0, 1.0, 0.25)
    checks.append(("ctm gamma 0 equals map step", bool(np.all(a == b)), "bitwise"))
    return checks


def _cmd_oracle_check(args) -> int:
    checks = _oracle_checks()
    failed = 0
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name} ({detail})")
        failed += 0 if ok else 1
    return 0 if failed == 0 else 3


def _cmd_proposal_dump(args) -> int:
    z, f_max, f_min = proposal_density_table(args.mu1, args.mu2, args.n)
    np.savetxt(
        args.out,
        np.stack([z, f_max, f_min], axis=1),
        delimiter=",",
        header="z,f_max,f_min",
        comments="",
    )
    print(f"wrote {args.n} density rows to {args.out}")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="flowmaplab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-flow", help="train a flow model (warm-up stage)")
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--out", default=None)
    t.set_defaults(func=_cmd_train_flow)

    f = sub.add_parser("finetune-dmf", help="convert a flow checkpoint and fine-tune the map")
    f.add_argument("--config", default=None)
    f.add_argument("--init", required=True, help="flow (or map) checkpoint to start from")
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--steps", type=int, default=None)
    f.add_argument(
        "--split", "--depth", type=int, default=None, dest="split", help="encoder depth at conversion"
    )
    f.add_argument("--decoder-only", action="store_true")
    f.add_argument("--out", default=None)
    f.set_defaults(func=_cmd_finetune_dmf)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True, help="CSV path for samples")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--kind", default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--shift", type=float, default=None)
    s.add_argument("--gamma", type=float, default=None)
    s.add_argument("--cfg-scale", type=float, default=None, dest="cfg_scale")
    s.add_argument("--labels", default="uniform", help="uniform | none | fixed:<k>")
    s.add_argument("--raw-weights", action="store_true", help="use raw instead of EMA weights")
    s.add_argument("--traj", default=None, help="optional CSV path for trajectories")
    s.set_defaults(func=_cmd_sample)

    e = sub.add_parser("eval", help="sample a checkpoint and score it against the dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--report", required=True, help="JSON-lines report path (appended)")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--kind", default=None)
    e.add_argument("--steps", type=int, default=None)
    e.add_argument("--shift", type=float, default=None)
    e.add_argument("--gamma", type=float, default=None)
    e.add_argument("--cfg-scale", type=float, default=None, dest="cfg_scale")
    e.add_argument("--raw-weights", action="store_true")
    e.set_defaults(func=_cmd_eval)

    o = sub.add_parser("oracle-check", help="run closed-form identity checks")
    o.set_defaults(func=_cmd_oracle_check)

    d = sub.add_parser("proposal-dump", help="export time-proposal densities as CSV")
    d.add_argument("--mu1", type=float, default=0.4)
    d.add_argument("--mu2", type=float, default=-1.2)
    d.add_argument("--n", type=int, default=512)
    d.add_argument("--out", required=True)
    d.set_defaults(func=_cmd_proposal_dump)
    return p


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures map to a distinct code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
