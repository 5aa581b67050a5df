"""Timestep-budgeted, content-conditioned block routing.

A small MLP maps (sinusoidal timestep features, content embedding) to one
logit per block. The top-K logits become a hard binary mask; the first and
last blocks are always active and the budget K counts them. Gradients reach
the logits through a sigmoid surrogate while the forward value stays the
exact hard mask.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tz
from .archive import load_archive, save_archive
from .data import Condition
from .errors import ConfigError, ContractError
from .model import (
    DiTParams,
    ForwardTaps,
    cond_tensors_for,
    embed_input,
    project_output,
    rope_tables,
    run_block,
    sinusoidal_t,
)
from .tensor import Tensor, seeded_rng


@dataclass
class RoutingConfig:
    min_blocks: int = 4
    max_blocks: int = 7
    sin_dim: int = 32
    content_dim: int = 32
    hidden_dim: int = 64


@dataclass
class RouterParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    wc: Tensor  # content projection into the router's content space
    bc: Tensor
    sin_dim: int
    content_dim: int
    hidden_dim: int
    n_blocks: int
    mode: str

    def named(self):
        for name in ("w1", "b1", "w2", "b2", "w3", "b3", "wc", "bc"):
            yield name, getattr(self, name)


@dataclass
class RoutingMask:
    hard: np.ndarray  # binary, length n_blocks
    soft: np.ndarray  # sigmoid of the logits
    ste: list[Tensor]  # per-block scalar gates; hard-valued, soft-gradiented
    budget: int
    t: int


def budget(t: int, t_max: int, min_blocks: int, max_blocks: int, n_blocks: int) -> int:
    """Linear-in-timestep active-block count, rounded half-up and clamped."""
    if not 2 <= min_blocks <= max_blocks <= n_blocks:
        raise ConfigError(f"need 2 <= min_blocks <= max_blocks <= n_blocks, got {min_blocks}/{max_blocks}/{n_blocks}")
    if not 0 <= t <= t_max:
        raise ConfigError(f"timestep {t} outside [0, {t_max}]")
    raw = min_blocks + (max_blocks - min_blocks) * t / t_max
    k = int(np.floor(raw + 0.5))
    return max(min_blocks, min(max_blocks, k))


def sin_embed(t: float, dim: int) -> np.ndarray:
    """Sinusoidal timestep features; constant with respect to the graph."""
    return sinusoidal_t(float(t), dim)


def init_router(config_dim_mode: tuple[int, str], routing: RoutingConfig, n_blocks: int, seed: int, channels: int) -> RouterParams:
    """``config_dim_mode`` carries (cond_dim, mode); t2v content comes from
    2*channels latent statistics, i2v from the image embedding."""
    cond_dim, mode = config_dim_mode
    content_in = cond_dim if mode == "i2v" else 2 * channels
    rng = seeded_rng(seed)

    def lin(n_in: int, n_out: int) -> Tensor:
        return Tensor(rng.normal(scale=n_in ** -0.5, size=(n_in, n_out)))

    h = routing.hidden_dim
    return RouterParams(
        w1=lin(routing.sin_dim + routing.content_dim, h),
        b1=Tensor(np.zeros(h)),
        w2=lin(h, h),
        b2=Tensor(np.zeros(h)),
        w3=lin(h, n_blocks),
        b3=Tensor(np.zeros(n_blocks)),
        wc=lin(content_in, routing.content_dim),
        bc=Tensor(np.zeros(routing.content_dim)),
        sin_dim=routing.sin_dim,
        content_dim=routing.content_dim,
        hidden_dim=h,
        n_blocks=n_blocks,
        mode=mode,
    )


def save_router(path: str | Path, rp: RouterParams, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.update(
        {
            "sin_dim": rp.sin_dim,
            "content_dim": rp.content_dim,
            "hidden_dim": rp.hidden_dim,
            "n_blocks": rp.n_blocks,
            "mode": rp.mode,
        }
    )
    save_archive(path, {n: t.data for n, t in rp.named()}, meta=meta)


def router_from_entries(entries: dict[str, np.ndarray], meta: dict, prefix: str = "") -> RouterParams:
    def get(name: str) -> Tensor:
        return Tensor(entries[f"{prefix}{name}"])

    return RouterParams(
        w1=get("w1"),
        b1=get("b1"),
        w2=get("w2"),
        b2=get("b2"),
        w3=get("w3"),
        b3=get("b3"),
        wc=get("wc"),
        bc=get("bc"),
        sin_dim=int(meta["sin_dim"]),
        content_dim=int(meta["content_dim"]),
        hidden_dim=int(meta["hidden_dim"]),
        n_blocks=int(meta["n_blocks"]),
        mode=meta["mode"],
    )


def load_router(path: str | Path) -> tuple[RouterParams, dict]:
    entries, meta = load_archive(path)
    return router_from_entries(entries, meta), meta


def content_embedding(rp: RouterParams, cond: Condition | None = None, x_t: np.ndarray | None = None) -> Tensor:
    """i2v: project the condition's image embedding. t2v: project per-channel
    mean and std of the noisy latent. Latent statistics are taken as
    gradient-free inputs, so routing never perturbs the velocity path."""
    if rp.mode == "i2v":
        if cond is None or cond.image is None:
            raise ContractError("i2v content embedding needs a condition with an image embedding")
        raw = cond.image
    else:
        if x_t is None:
            raise ContractError("t2v content embedding needs the noisy latent")
        flat = np.asarray(x_t, dtype=np.float64).reshape(-1, x_t.shape[-1])
        raw = np.concatenate([flat.mean(axis=0), flat.std(axis=0)])
    vec = Tensor(raw.reshape(1, -1))
    out = tz.add(tz.matmul(vec, rp.wc), rp.bc)
    return tz.reshape(out, (rp.content_dim,))


def router_forward(rp: RouterParams, t: int, e_c: Tensor) -> Tensor:
    """Block-importance logits from timestep and content features."""
    if e_c.shape != (rp.content_dim,):
        raise ContractError(f"content embedding shape {e_c.shape} != ({rp.content_dim},)")
    inp = tz.concat([Tensor(sin_embed(t, rp.sin_dim)), e_c], axis=0)
    h = tz.reshape(inp, (1, rp.sin_dim + rp.content_dim))
    h = tz.silu(tz.add(tz.matmul(h, rp.w1), rp.b1))
    h = tz.silu(tz.add(tz.matmul(h, rp.w2), rp.b2))
    out = tz.add(tz.matmul(h, rp.w3), rp.b3)
    return tz.reshape(out, (rp.n_blocks,))


def topk_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Hard mask with the boundary blocks forced on and the best K-2 interior
    logits selected; ties break toward the lower block index."""
    n = logits.shape[0]
    if not 2 <= k <= n:
        raise ConfigError(f"budget must be in [2, {n}], got {k}")
    mask = np.zeros(n)
    mask[0] = 1.0
    mask[n - 1] = 1.0
    interior = list(range(1, n - 1))
    interior.sort(key=lambda i: (-logits[i], i))
    for i in interior[: k - 2]:
        mask[i] = 1.0
    return mask


def ste_mask(logits: Tensor, k: int, t: int) -> RoutingMask:
    """Hard-valued mask whose interior entries backpropagate through the
    sigmoid surrogate; boundary entries are constants with zero gradient."""
    hard = topk_mask(logits.data, k)
    soft_t = tz.sigmoid(logits)
    n = logits.shape[0]
    gates: list[Tensor] = []
    for i in range(n):
        if i == 0 or i == n - 1:
            gates.append(Tensor(np.array(1.0)))
        else:
            s_i = tz.reshape(tz.slice_axis0(soft_t, i, i + 1), ())
            gates.append(tz.straight_through(np.array(hard[i]), s_i))
    return RoutingMask(hard=hard, soft=soft_t.data.copy(), ste=gates, budget=k, t=t)


def routed_forward(
    student: DiTParams,
    rp: RouterParams,
    routing: RoutingConfig,
    x_t: np.ndarray,
    t: int,
    cond: Condition,
    training: bool = False,
    taps_requested: bool = False,
    exec_counter: list[int] | None = None,
    mask: RoutingMask | None = None,
):
    """Blend each block into the residual stream under the routing mask.

    Inference (training=False) genuinely skips blocks whose hard gate is zero;
    training mode evaluates every block so the gates' surrogate gradients see
    each block's contribution. Returns (velocity, mask, taps or None).
    """
    config = student.config
    if mask is None:
        e_c = content_embedding(rp, cond=cond, x_t=x_t)
        logits = router_forward(rp, t, e_c)
        k = budget(t, config.t_max, routing.min_blocks, routing.max_blocks, config.n_blocks)
        mask = ste_mask(logits, k, t)
    h, t_feat = embed_input(student, x_t, t)
    conds = cond_tensors_for(student, cond)
    rope = rope_tables(config)
    taps = ForwardTaps([], [], [], [], [], []) if taps_requested else None
    for i, blk in enumerate(student.blocks):
        if taps is not None:
            taps.hidden_pre.append(h)
        if not training and mask.hard[i] == 0.0:
            if taps is not None:
                taps.sa_attn.append(None)
                taps.sa_weighted_v.append(None)
                taps.ca_attn.append(None)
                taps.ca_weighted_v.append(None)
                taps.hidden_post.append(h)
            continue
        out = run_block(blk, config, h, t_feat, conds, rope, taps)
        if exec_counter is not None:
            exec_counter[i] += 1
        if training:
            gate = mask.ste[i]
            h = tz.add(tz.mul(out, gate), tz.mul(h, tz.add(tz.neg(gate), 1.0)))
        else:
            # hard gate is 1 here; adopt the block output with no arithmetic
            # so a full mask reproduces the unrouted forward bit for bit
            h = out
        if taps is not None:
            taps.hidden_post.append(h)
    return project_output(student, h), mask, taps


def activation_frequency(
    rp: RouterParams,
    routing: RoutingConfig,
    t_max: int,
    n_blocks: int,
    t_grid: list[int],
    content_inputs: list[dict],
) -> np.ndarray:
    """Fraction of content samples activating each block at each timestep.

    ``content_inputs`` entries carry ``cond`` and/or ``x_t`` per the mode.
    """
    freq = np.zeros((n_blocks, len(t_grid)))
    with tz.stop_recording():
        for col, t in enumerate(t_grid):
            k = budget(t, t_max, routing.min_blocks, routing.max_blocks, n_blocks)
            for sample in content_inputs:
                e_c = content_embedding(rp, cond=sample.get("cond"), x_t=sample.get("x_t"))
                logits = router_forward(rp, t, e_c)
                freq[:, col] += topk_mask(logits.data, k)
            freq[:, col] /= len(content_inputs)
    return freq


def exhaustive_topk_oracle(logits: np.ndarray, k: int) -> np.ndarray:
    """Enumerate all interior subsets and keep the max logit-sum one
    (ties resolved toward lexicographically smallest index set)."""
    n = logits.shape[0]
    best = None
    best_key = None
    for combo in itertools.combinations(range(1, n - 1), k - 2):
        key = (-sum(logits[i] for i in combo), combo)
        if best_key is None or key < best_key:
            best_key = key
            best = combo
    mask = np.zeros(n)
    mask[0] = 1.0
    mask[n - 1] = 1.0
    for i in best or ():
        mask[i] = 1.0
    return mask


def write_frequency_csv(freq: np.ndarray, t_grid: list[int], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block"] + [f"t_{t}" for t in t_grid])
        for i in range(freq.shape[0]):
            w.writerow([i] + [f"{v:.6g}" for v in freq[i]])
