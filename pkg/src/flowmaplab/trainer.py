"""Training loop: AdamW with freeze masks, EMA shadow, staged runs,
and bit-exact binary checkpoints.

Stages:
    flow-warmup       train a flow model with the single-time loss only
    map-finetune      train a flow map (converted or fresh) with both terms
    decoder-finetune  like map-finetune but only decoder + time embedding
                      parameters move

Determinism contract: a stage is a pure function of (config, dataset
spec, init checkpoint).  Every random draw comes from a stream labelled
by design (seed, stage, step), so resuming or re-running reproduces the
same bits.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bench import DatasetSpec, sample_dataset
from .net import (
    ARCH_DECOUPLED_MAP,
    ARCH_FLOW,
    NetConfig,
    convert_flow_to_map,
    freeze_mask,
    init_params,
)
from .numerics import (
    NonFiniteLossError,
    RngStream,
    rng_fork,
    tree_all_finite,
    tree_copy,
    tree_flatten,
    tree_from_paths,
    tree_map,
    value_and_grad,
)
from .objective import GuidanceConfig, LossConfig, init_phi, total_loss
from .process import TimeProposal

STAGES = ("flow-warmup", "map-finetune", "decoder-finetune")

_MAGIC = b"FMLCKPT1"


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "flow-warmup"
    steps: int = 1000
    batch_size: int = 256
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    seed: int = 0
    split: int = 0  # conversion depth when fine-tuning starts from a flow checkpoint
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    proposal: TimeProposal = field(default_factory=TimeProposal)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0.0 or self.eps <= 0.0:
            raise ValueError("lr and eps must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")

    @property
    def include_mf(self) -> bool:
        return self.stage != "flow-warmup"

    @property
    def freeze_mode(self) -> str:
        return "decoder-only" if self.stage == "decoder-finetune" else "all"


@dataclass
class TrainState:
    params: dict
    phi: dict
    ema: dict
    opt_m: dict
    opt_v: dict
    opt_count: int
    step: int
    rejected: int


def adamw_update(params, grads, m, v, count, mask, cfg: TrainConfig):
    """One decoupled-weight-decay Adam step on masked leaves.

    Frozen leaves keep their parameters and moments bitwise unchanged.
    ``count`` is the post-increment step index used for bias correction.
    """
    b1, b2 = cfg.betas
    c1 = 1.0 - b1**count
    c2 = 1.0 - b2**count

    def upd(p, g, m_, v_, keep):
        if not keep:
            return p, m_, v_
        m_new = b1 * m_ + (1.0 - b1) * g
        v_new = b2 * v_ + (1.0 - b2) * g * g
        step_dir = (m_new / c1) / (np.sqrt(v_new / c2) + cfg.eps)
        p_new = p - cfg.lr * (step_dir + cfg.weight_decay * p)
        return p_new, m_new, v_new

    triples = tree_map(upd, params, grads, m, v, mask)
    return _split_triples(triples)


def _split_triples(triples):
    # leaves are (p, m, v) tuples; they come out of tree_map as values,
    # so split by walking the container structure directly
    def walk(node, i):
        if isinstance(node, dict):
            return {k: walk(v, i) for k, v in node.items()}
        if isinstance(node, list):
            return [walk(v, i) for v in node]
        return node[i]

    return walk(triples, 0), walk(triples, 1), walk(triples, 2)


def ema_update(shadow, params, decay: float):
    return tree_map(lambda s, p: decay * s + (1.0 - decay) * p, shadow, params)


def masked_norm(grads, mask) -> float:
    total = 0.0
    flat_g = tree_flatten(grads)
    flat_m = dict(tree_flatten(mask))
    for path, g in flat_g:
        if flat_m[path]:
            total += float(np.sum(np.asarray(g) ** 2))
    return float(np.sqrt(total))


def train_step(
    state: TrainState,
    x0: np.ndarray,
    y: Optional[np.ndarray],
    *,
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    mask,
) -> dict:
    """Advance ``state`` by one step in place; returns the log record.

    A non-finite loss, activation or gradient rejects the update: the
    parameters stay put but the step counter still advances, so the
    data/rng schedule is unaffected.
    """
    rng = rng_fork(train_cfg.seed, f"train/{train_cfg.stage}/step{state.step}")
    combined_params = {"net": state.params, "phi": state.phi}
    combined_mask = {"net": mask, "phi": tree_map(lambda _: True, state.phi)}

    def loss_fn(tree):
        return total_loss(
            tree["net"],
            tree["phi"],
            x0,
            y,
            net_cfg=net_cfg,
            guidance=train_cfg.guidance,
            proposal=train_cfg.proposal,
            loss_cfg=train_cfg.loss,
            rng=rng.child("loss"),
            include_mf=train_cfg.include_mf,
        )

    log = {
        "step": state.step,
        "loss_fm": float("nan"),
        "loss_mf": float("nan"),
        "grad_norm": float("nan"),
        "phi_mean": float("nan"),
        "rejected": False,
    }
    try:
        (loss, aux), grads = value_and_grad(loss_fn, combined_params, has_aux=True)
        finite = tree_all_finite(grads)
    except NonFiniteLossError:
        finite = False
        grads = None
    if not finite:
        state.step += 1
        state.rejected += 1
        log["rejected"] = True
        return log

    log.update(aux)
    log["grad_norm"] = masked_norm(grads, combined_mask)
    state.opt_count += 1
    new_params, new_m, new_v = adamw_update(
        combined_params, grads, state.opt_m, state.opt_v, state.opt_count, combined_mask, train_cfg
    )
    state.params = new_params["net"]
    state.phi = new_params["phi"]
    state.opt_m = new_m
    state.opt_v = new_v
    state.ema = ema_update(state.ema, state.params, train_cfg.ema_decay)
    state.step += 1
    return log


@dataclass
class Checkpoint:
    net_cfg: NetConfig
    train_cfg: TrainConfig
    step: int
    seed: int
    rejected: int
    params: dict
    ema: dict
    phi: dict
    opt_m: dict
    opt_v: dict
    opt_count: int

    def eval_params(self, use_ema: bool = True) -> dict:
        return self.ema if use_ema else self.params


def _dataclass_to_dict(obj):
    return dataclasses.asdict(obj)


def _net_cfg_from_dict(d: dict) -> NetConfig:
    return NetConfig(**d)


def _train_cfg_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["betas"] = tuple(d["betas"])
    d["guidance"] = GuidanceConfig(
        omega=d["guidance"]["omega"],
        interval=tuple(d["guidance"]["interval"]),
        class_dropout=d["guidance"]["class_dropout"],
    )
    d["proposal"] = TimeProposal(**d["proposal"])
    d["loss"] = LossConfig(**d["loss"])
    return TrainConfig(**d)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Write header JSON + float64-LE blob + sha256, atomically."""
    trees = {
        "params": ckpt.params,
        "ema": ckpt.ema,
        "phi": ckpt.phi,
        "opt_m": ckpt.opt_m,
        "opt_v": ckpt.opt_v,
    }
    flat = tree_flatten(trees)
    chunks = []
    layout = []
    for p, arr in flat:
        a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        chunks.append(a.astype("<f8").tobytes())
        layout.append({"path": p, "shape": list(a.shape)})
    blob = b"".join(chunks)
    header = {
        "format_version": 1,
        "net_config": _dataclass_to_dict(ckpt.net_cfg),
        "train_config": _dataclass_to_dict(ckpt.train_cfg),
        "step": ckpt.step,
        "seed": ckpt.seed,
        "rejected": ckpt.rejected,
        "opt_count": ckpt.opt_count,
        "layout": layout,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    """Inverse of :func:`save_checkpoint`; verifies magic and checksum."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        blob = fh.read()
    if header.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise ValueError("checkpoint blob checksum mismatch (file corrupted?)")
    items = []
    offset = 0
    for entry in header["layout"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(
            entry["shape"]
        )
        items.append((entry["path"], arr.astype(np.float64)))
        offset += size * 8
    trees = tree_from_paths(items)
    return Checkpoint(
        net_cfg=_net_cfg_from_dict(header["net_config"]),
        train_cfg=_train_cfg_from_dict(header["train_config"]),
        step=int(header["step"]),
        seed=int(header["seed"]),
        rejected=int(header["rejected"]),
        params=trees["params"],
        ema=trees["ema"],
        phi=trees["phi"],
        opt_m=trees["opt_m"],
        opt_v=trees["opt_v"],
        opt_count=int(header["opt_count"]),
    )


def _stage_init(
    train_cfg: TrainConfig, net_cfg: Optional[NetConfig], init: Optional[Checkpoint]
) -> tuple[dict, NetConfig]:
    """Resolve initial parameters and architecture for a stage."""
    if init is None:
        if net_cfg is None:
            raise ValueError("need a NetConfig when starting from scratch")
        if train_cfg.stage == "flow-warmup" and net_cfg.arch != ARCH_FLOW:
            raise ValueError("flow-warmup trains a flow architecture")
        if train_cfg.stage == "decoder-finetune":
            raise ValueError("decoder-finetune needs an init checkpoint")
        params = init_params(net_cfg, rng_fork(train_cfg.seed, "init/net"))
        return params, net_cfg

    if init.net_cfg.arch == ARCH_FLOW and train_cfg.stage in (
        "map-finetune",
        "decoder-finetune",
    ):
        params, cfg = convert_flow_to_map(init.params, init.net_cfg, train_cfg.split)
        return params, cfg
    if train_cfg.stage == "decoder-finetune" and init.net_cfg.arch != ARCH_DECOUPLED_MAP:
        raise ValueError("decoder-finetune needs a decoupled-map model")
    return tree_copy(init.params), init.net_cfg


def run_stage(
    train_cfg: TrainConfig,
    data: DatasetSpec,
    net_cfg: Optional[NetConfig] = None,
    init: Optional[Checkpoint] = None,
    out_dir: Optional[str] = None,
) -> Checkpoint:
    """Run one training stage start to finish and return the checkpoint.

    When ``out_dir`` is given, per-step JSON lines go to
    ``<out_dir>/train_log.jsonl`` and the final checkpoint to
    ``<out_dir>/checkpoint.bin``.  A fresh EMA shadow, weight net and
    optimizer are created at stage entry (conversion changes what the
    decoder computes away from r = t, so stale statistics would not
    transfer).
    """
    params, net_cfg = _stage_init(train_cfg, net_cfg, init)
    phi = init_phi(rng_fork(train_cfg.seed, "init/phi"))
    mask = freeze_mask(params, net_cfg, train_cfg.freeze_mode)
    state = TrainState(
        params=params,
        phi=phi,
        ema=tree_copy(params),
        opt_m=tree_map(np.zeros_like, {"net": params, "phi": phi}),
        opt_v=tree_map(np.zeros_like, {"net": params, "phi": phi}),
        opt_count=0,
        step=0,
        rejected=0,
    )

    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "a", encoding="utf-8")
    started = time.monotonic()
    try:
        for k in range(train_cfg.steps):
            batch_rng = rng_fork(train_cfg.seed, f"data/{train_cfg.stage}/step{k}")
            x0, y = sample_dataset(data, train_cfg.batch_size, batch_rng)
            log = train_step(
                state, x0, y, net_cfg=net_cfg, train_cfg=train_cfg, mask=mask
            )
            if log_fh is not None:
                log_fh.write(json.dumps(log, sort_keys=True) + "\n")
    finally:
        if log_fh is not None:
            log_fh.write(
                json.dumps(
                    {
                        "stage": train_cfg.stage,
                        "wall_time": time.monotonic() - started,
                        "rejected_total": state.rejected,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
            log_fh.close()

    ckpt = Checkpoint(
        net_cfg=net_cfg,
        train_cfg=train_cfg,
        step=state.step,
        seed=train_cfg.seed,
        rejected=state.rejected,
        params=state.params,
        ema=state.ema,
        phi=state.phi,
        opt_m=state.opt_m,
        opt_v=state.opt_v,
        opt_count=state.opt_count,
    )
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), ckpt)
    return ckpt
