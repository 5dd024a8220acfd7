"""Conditioned residual MLP in three wiring variants.

The same parameter layout serves three roles:

* ``flow``: every block is conditioned on embed(t) + embed(y); the
  r argument is ignored.  The output is an instantaneous velocity.
* ``joint-map``: every block sees embed(t) + embed_delta(t - r) +
  embed(y), with a separate embedding layer for the gap.
* ``decoupled-map``: blocks below ``split`` (the encoder) see
  embed(t) + embed(y); blocks from ``split`` on and the output head
  (the decoder) see embed(r) + embed(y), produced by the *same*
  time-embedding parameters.  Parameter count is therefore identical
  to ``flow``, and at r = t the two wirings compute bitwise-identical
  outputs, which is what makes in-place conversion of a trained flow
  model possible.

Blocks are pre-norm residual MLPs whose LayerNorm output is modulated
by (1 + scale, shift) and whose residual branch is gated, all three
read off the conditioning vector.  Modulation weights and the output
head are zero-initialized so a fresh model is the zero function.
Optionally each block adds a single-head self-attention sublayer over
a small token axis carved out of the width.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Optional

import numpy as np

from .numerics import NonFiniteLossError, RngStream, tree_copy, tree_leaves, tree_map
from .numerics import ops

ARCH_FLOW = "flow"
ARCH_JOINT_MAP = "joint-map"
ARCH_DECOUPLED_MAP = "decoupled-map"
ARCHS = (ARCH_FLOW, ARCH_JOINT_MAP, ARCH_DECOUPLED_MAP)

# Top sinusoid frequency for time features.  Kept modest so that
# finite-difference probes of d/dt at h ~ 1e-5 stay well conditioned.
_OMEGA_MIN = 1.0
_OMEGA_MAX = 100.0


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = 2
    width: int = 64
    depth: int = 4
    arch: str = ARCH_FLOW
    split: int = 0  # encoder depth; meaningful only for decoupled-map
    num_classes: int = 1
    attention: bool = False
    qk_norm: bool = False
    time_embed_dim: int = 0  # 0 means "use width"
    mlp_ratio: int = 2
    tokens: int = 4  # token count when attention is on

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}, expected one of {ARCHS}")
        if self.depth < 1 or self.width < 1 or self.input_dim < 1:
            raise ValueError("depth, width and input_dim must be positive")
        if self.arch == ARCH_DECOUPLED_MAP:
            if not 0 < self.split < self.depth:
                raise ValueError(
                    f"decoupled-map needs 0 < split < depth, got split={self.split}"
                )
        elif self.split != 0:
            raise ValueError(f"split is only meaningful for decoupled-map, got {self.split}")
        if self.embed_dim % 2 != 0:
            raise ValueError("time embedding dimension must be even")
        if self.qk_norm and not self.attention:
            raise ValueError("qk_norm requires attention")
        if self.attention:
            if self.tokens < 2:
                raise ValueError("attention needs at least 2 tokens")
            if self.width % self.tokens != 0:
                raise ValueError(f"width {self.width} not divisible by tokens {self.tokens}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be at least 1")

    @property
    def embed_dim(self) -> int:
        return self.time_embed_dim if self.time_embed_dim else self.width

    @property
    def null_class(self) -> int:
        """Index of the unconditional row in the class table."""
        return self.num_classes

    @property
    def token_dim(self) -> int:
        return self.width // self.tokens if self.attention else self.width


def time_features(t, dim: int):
    """Sinusoidal features of a (B,) time vector: (B, dim), dim even.

    Frequencies are geometric between _OMEGA_MIN and _OMEGA_MAX; works
    in plain, reverse and forward mode.
    """
    half = dim // 2
    k = np.arange(half) / max(half - 1, 1)
    omegas = _OMEGA_MIN * (_OMEGA_MAX / _OMEGA_MIN) ** k
    ang = ops.reshape(t, (-1, 1)) * omegas[None, :]
    return ops.concatenate([ops.sin(ang), ops.cos(ang)], axis=-1)


def _embed_time(p: dict, t, cfg: NetConfig):
    h = time_features(t, cfg.embed_dim)
    h = ops.silu(h @ p["w1"] + p["b1"])
    return h @ p["w2"] + p["b2"]


def _linear_init(rng: RngStream, fan_in: int, fan_out: int) -> dict:
    w = rng.normal((fan_in, fan_out)) / np.sqrt(fan_in)
    return {"w": w, "b": np.zeros(fan_out)}


def _embed_init(rng: RngStream, dim: int) -> dict:
    return {
        "w1": rng.normal((dim, dim)) / np.sqrt(dim),
        "b1": np.zeros(dim),
        "w2": rng.normal((dim, dim)) / np.sqrt(dim),
        "b2": np.zeros(dim),
    }


def _block_init(rng: RngStream, cfg: NetConfig, zero_gates: bool) -> dict:
    e = cfg.embed_dim
    d = cfg.token_dim
    hidden = cfg.mlp_ratio * d
    n_mod = 6 if cfg.attention else 3
    p = {
        "mod_w": (
            np.zeros((e, n_mod * d))
            if zero_gates
            else rng.normal((e, n_mod * d)) / np.sqrt(e)
        ),
        "mod_b": np.zeros(n_mod * d),
        "w1": rng.normal((d, hidden)) / np.sqrt(d),
        "b1": np.zeros(hidden),
        "w2": rng.normal((hidden, d)) / np.sqrt(hidden),
        "b2": np.zeros(d),
    }
    if cfg.attention:
        p["wq"] = rng.normal((d, d)) / np.sqrt(d)
        p["wk"] = rng.normal((d, d)) / np.sqrt(d)
        p["wv"] = rng.normal((d, d)) / np.sqrt(d)
        p["wo"] = rng.normal((d, d)) / np.sqrt(d)
        p["bo"] = np.zeros(d)
    return p


def init_params(cfg: NetConfig, rng: RngStream, zero_gates: bool = True) -> dict:
    """Fresh parameter tree for ``cfg``.

    With ``zero_gates`` (the default) all modulation projections and the
    output head start at zero, making the initial model the zero map.
    Tests that need a fully random net pass ``zero_gates=False``.
    """
    e = cfg.embed_dim
    params = {
        "in_proj": _linear_init(rng.child("in_proj"), cfg.input_dim, cfg.width),
        "time_embed": _embed_init(rng.child("time_embed"), e),
        "class_embed": 0.02 * rng.child("class_embed").normal((cfg.num_classes + 1, e)),
        "blocks": [
            _block_init(rng.child(f"block{i}"), cfg, zero_gates) for i in range(cfg.depth)
        ],
        "head": {
            "mod_w": (
                np.zeros((e, 2 * cfg.width))
                if zero_gates
                else rng.child("head").normal((e, 2 * cfg.width)) / np.sqrt(e)
            ),
            "mod_b": np.zeros(2 * cfg.width),
            "w": (
                np.zeros((cfg.width, cfg.input_dim))
                if zero_gates
                else rng.child("head_w").normal((cfg.width, cfg.input_dim))
                / np.sqrt(cfg.width)
            ),
            "b": np.zeros(cfg.input_dim),
        },
    }
    if cfg.arch == ARCH_JOINT_MAP:
        params["delta_embed"] = _embed_init(rng.child("delta_embed"), e)
    return params


def param_count(params: Any) -> int:
    return int(sum(np.size(leaf) for leaf in tree_leaves(params)))


def _chunk(m, k: int, size: int):
    return [m[:, i * size : (i + 1) * size] for i in range(k)]


def _attention(q, k, v, qk_norm: bool, return_weights: bool = False):
    """Single-head scaled dot-product attention over (B, T, D) tokens."""
    if qk_norm:
        q = ops.rms_norm(q)
        k = ops.rms_norm(k)
    d = ops.primal(q).shape[-1]
    logits = (q @ ops.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d))
    weights = ops.softmax(logits, axis=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def _mlp_block(p: dict, h, cond):
    mod = ops.silu(cond) @ p["mod_w"] + p["mod_b"]
    w = ops.primal(h).shape[-1]
    shift, scale, gate = _chunk(mod, 3, w)
    u = ops.layer_norm(h) * (1.0 + scale) + shift
    u = ops.silu(u @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]
    return h + gate * u


def _attn_block(p: dict, h, cond, cfg: NetConfig):
    b = ops.primal(h).shape[0]
    d = cfg.token_dim
    mod = ops.silu(cond) @ p["mod_w"] + p["mod_b"]
    chunks = [ops.reshape(c, (b, 1, d)) for c in _chunk(mod, 6, d)]
    a_shift, a_scale, a_gate, m_shift, m_scale, m_gate = chunks

    u = ops.layer_norm(h) * (1.0 + a_scale) + a_shift
    att = _attention(u @ p["wq"], u @ p["wk"], u @ p["wv"], cfg.qk_norm)
    h = h + a_gate * (att @ p["wo"] + p["bo"])

    u = ops.layer_norm(h) * (1.0 + m_scale) + m_shift
    u = ops.silu(u @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]
    return h + m_gate * u


def _as_batch(t, batch: int):
    """Lift a scalar time to a (B,) vector; pass (B,) through unchanged."""
    if ops.primal(t).ndim == 0:
        return t * np.ones(batch)
    return t


def forward(
    params: dict,
    cfg: NetConfig,
    x,
    t,
    r=None,
    y: Optional[np.ndarray] = None,
    capture: Optional[list] = None,
):
    """Evaluate the network.

    Args:
        params: tree from :func:`init_params` (ndarray, Node or Dual leaves).
        x: (B, input_dim) state.
        t: scalar or (B,) current time.
        r: scalar or (B,) target time; ignored by ``flow``, required for
           the map variants (defaults to t).
        y: (B,) int class labels in [0, num_classes]; ``num_classes`` is
           the null row.  None means all-null.
        capture: optional list; post-block activations (and the final
           head input) are appended as plain arrays, encoder blocks first.

    Returns:
        (B, input_dim) velocity (flow) or average velocity (maps).
    """
    xp = ops.primal(x)
    batch = xp.shape[0]
    if xp.ndim != 2 or xp.shape[1] != cfg.input_dim:
        raise ValueError(f"x must be (B, {cfg.input_dim}), got {xp.shape}")
    if y is None:
        y = np.full(batch, cfg.null_class, dtype=np.int64)
    y = np.asarray(y)
    if y.shape != (batch,):
        raise ValueError(f"y must be ({batch},), got {y.shape}")
    if y.min() < 0 or y.max() > cfg.null_class:
        raise ValueError(
            f"class index out of range [0, {cfg.null_class}]: {int(y.min())}..{int(y.max())}"
        )
    t = _as_batch(t, batch)
    r = t if r is None else _as_batch(r, batch)

    temb = _embed_time(params["time_embed"], t, cfg)
    yemb = ops.take_rows(params["class_embed"], y)

    if cfg.arch == ARCH_FLOW:
        enc_cond = dec_cond = temb + yemb
    elif cfg.arch == ARCH_JOINT_MAP:
        demb = _embed_time(params["delta_embed"], t - r, cfg)
        enc_cond = dec_cond = temb + demb + yemb
    else:
        remb = _embed_time(params["time_embed"], r, cfg)
        enc_cond = temb + yemb
        dec_cond = remb + yemb

    h = x @ params["in_proj"]["w"] + params["in_proj"]["b"]
    if cfg.attention:
        h = ops.reshape(h, (batch, cfg.tokens, cfg.token_dim))

    split = cfg.split if cfg.arch == ARCH_DECOUPLED_MAP else cfg.depth
    for i, blk in enumerate(params["blocks"]):
        cond = enc_cond if i < split else dec_cond
        h = _attn_block(blk, h, cond, cfg) if cfg.attention else _mlp_block(blk, h, cond)
        if not np.all(np.isfinite(ops.primal(h))):
            raise NonFiniteLossError(f"non-finite activation after block {i}")
        if capture is not None:
            capture.append(np.array(ops.primal(h), copy=True))

    if cfg.attention:
        h = ops.reshape(h, (batch, cfg.width))
    head = params["head"]
    mod = ops.silu(dec_cond) @ head["mod_w"] + head["mod_b"]
    shift, scale = _chunk(mod, 2, cfg.width)
    # No norm here: the residual stream enters the head raw, so the
    # model keeps a conditioning-scaled affine path in x and can track
    # velocity fields that keep growing outside the data support.
    h = h * (1.0 + scale) + shift
    if capture is not None:
        capture.append(np.array(ops.primal(h), copy=True))
    return h @ head["w"] + head["b"]


def convert_flow_to_map(params: dict, cfg: NetConfig, split: int) -> tuple[dict, NetConfig]:
    """Re-wire a trained flow model as a decoupled map.

    Copies parameters verbatim and only changes which conditioning
    vector the decoder half reads, so the returned model evaluated at
    r = t reproduces the flow model bitwise.
    """
    if cfg.arch != ARCH_FLOW:
        raise ValueError(f"can only convert a flow model, got arch {cfg.arch!r}")
    if not 0 < split < cfg.depth:
        raise ValueError(f"need 0 < split < depth={cfg.depth}, got {split}")
    new_cfg = replace(cfg, arch=ARCH_DECOUPLED_MAP, split=split)
    return tree_copy(params), new_cfg


def freeze_mask(params: dict, cfg: NetConfig, mode: str = "all") -> Any:
    """Boolean tree marking trainable leaves.

    ``"all"`` trains everything.  ``"decoder-only"`` (decoupled-map
    only) trains the decoder blocks, the output head and the shared
    time-embedding parameters, freezing the input projection, class
    table and encoder blocks.
    """
    if mode == "all":
        return tree_map(lambda _: True, params)
    if mode != "decoder-only":
        raise ValueError(f"unknown freeze mode {mode!r}")
    if cfg.arch != ARCH_DECOUPLED_MAP:
        raise ValueError("decoder-only freezing needs a decoupled-map model")
    mask = tree_map(lambda _: False, params)
    mask["time_embed"] = tree_map(lambda _: True, params["time_embed"])
    mask["head"] = tree_map(lambda _: True, params["head"])
    for i in range(cfg.split, cfg.depth):
        mask["blocks"][i] = tree_map(lambda _: True, params["blocks"][i])
    return mask
