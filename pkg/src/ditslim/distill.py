"""Two-stage distillation: width recovery first, then joint width-routing.

Stage one trains the full pruned student against the frozen teacher with four
loss terms (feature matching with outlier-token masking, teacher velocity,
data velocity, temporal consistency). Stage two starts from the stage-one
checkpoint, routes blocks with the straight-through mask, restricts feature
matching to active blocks, and updates student and router under separate
learning rates.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz
from .archive import save_archive
from .data import gen_condition, gen_latent_clip
from .errors import ContractError
from .model import DiTParams, ForwardTaps, dit_forward, forward_process
from .router import RouterParams, RoutingConfig, routed_forward
from .tensor import Tensor, Tape, seeded_rng, stop_recording

log = logging.getLogger("ditslim.distill")


@dataclass
class LossWeights:
    feature: float = 10.0
    teacher_velocity: float = 6.0
    data_velocity: float = 1.0
    temporal: float = 4.0

    def __post_init__(self):
        if min(self.feature, self.teacher_velocity, self.data_velocity, self.temporal) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    steps: int = 300
    warmup: int = 30
    lr_student: float = 1.5e-3
    # stage two fine-tunes: the router learns selection at a high rate while
    # the already-distilled student moves gently
    lr_student_stage2: float = 2e-4
    lr_router: float = 2e-2
    batch_size: int = 4
    sampled_blocks: int = 2
    seed: int = 0
    grad_clip: float | None = None
    checkpoint_interval: int = 100


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def outlier_token_mask(teacher_feature: np.ndarray) -> np.ndarray:
    """1 for tokens whose feature norm is within mean + 3*std of the
    per-token norms inside this sample, else 0."""
    norms = np.linalg.norm(teacher_feature, axis=-1)
    cut = norms.mean() + 3.0 * norms.std()
    return (norms <= cut).astype(np.float64)


def feature_loss(
    teacher_taps: ForwardTaps,
    student_taps: ForwardTaps,
    blocks: list[int],
    active_mask: np.ndarray | None = None,
) -> Tensor:
    """Mean over surviving blocks of the mean-square feature gap on
    non-outlier tokens. The teacher side is gradient-frozen; the projection
    is the identity because width pruning preserves the residual width."""
    if not blocks:
        raise ContractError("feature loss needs a nonempty block sample")
    if active_mask is not None:
        blocks = [i for i in blocks if active_mask[i] > 0.5]
        if not blocks:
            log.warning("all sampled blocks inactive; feature loss contributes 0")
            return Tensor(np.array(0.0))
    total = None
    for i in blocks:
        t_feat = tz.stop_gradient(teacher_taps.hidden_post[i])
        s_feat = student_taps.hidden_post[i]
        keep = outlier_token_mask(t_feat.data)
        diff = tz.sub(s_feat, t_feat)
        per_token = tz.sum_lastdim(tz.mul(diff, diff))
        kept = tz.mul(per_token, Tensor(keep))
        denom = keep.sum() * t_feat.shape[-1]
        term = tz.mul(tz.sum_all(kept), 1.0 / denom)
        total = term if total is None else tz.add(total, term)
    return tz.mul(total, 1.0 / len(blocks))


def teacher_velocity_loss(v_student: Tensor, v_teacher: Tensor) -> Tensor:
    """Mean-square gap to the frozen teacher velocity."""
    diff = tz.sub(v_student, tz.stop_gradient(v_teacher))
    return tz.mean_all(tz.mul(diff, diff))


def data_velocity_loss(v_student: Tensor, x0: np.ndarray, eps: np.ndarray) -> Tensor:
    """Mean-square gap to the ground-truth flow target eps - x0."""
    target = Tensor(np.asarray(eps) - np.asarray(x0))
    diff = tz.sub(v_student, target)
    return tz.mean_all(tz.mul(diff, diff))


def _slice_diffs(v: Tensor) -> Tensor:
    n = v.shape[0]
    return tz.sub(tz.slice_axis0(v, 1, n), tz.slice_axis0(v, 0, n - 1))


def temporal_loss(v_student: Tensor, v_teacher: Tensor) -> Tensor:
    """Mean-square gap between student and teacher inter-slice differences."""
    diff = tz.sub(_slice_diffs(v_student), tz.stop_gradient(_slice_diffs(v_teacher)))
    return tz.mean_all(tz.mul(diff, diff))


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


def lr_schedule(step: int, base_lr: float, warmup: int, horizon: int) -> float:
    """Linear warmup from zero, then cosine decay to zero at the horizon."""
    if warmup >= horizon:
        raise ContractError(f"warmup {warmup} must be < horizon {horizon}")
    if step < warmup:
        return base_lr * step / warmup
    if step >= horizon:
        return 0.0
    frac = (step - warmup) / (horizon - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adaptive-moment optimizer over a named parameter group."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, named_params: list[tuple[str, Tensor]], grads: dict[Tensor, np.ndarray], lr: float) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in named_params:
            g = grads.get(p)
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data = p.data - lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_entries(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"{prefix}.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"{prefix}.v.{name}"] = arr
        return out

    def load_state(self, prefix: str, entries: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for key, arr in entries.items():
            if key.startswith(f"{prefix}.m."):
                self.m[key[len(prefix) + 3:]] = arr.copy()
            elif key.startswith(f"{prefix}.v."):
                self.v[key[len(prefix) + 3:]] = arr.copy()


def global_grad_norm(grads: dict[Tensor, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_grads(grads: dict[Tensor, np.ndarray], cap: float) -> None:
    norm = global_grad_norm(grads)
    if norm > cap:
        scale = cap / norm
        for t in grads:
            grads[t] = grads[t] * scale


# ---------------------------------------------------------------------------
# train state and batches
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    student: DiTParams
    router: RouterParams | None
    routing: RoutingConfig | None
    opt_student: Adam
    opt_router: Adam | None
    train: TrainConfig
    step: int = 0
    loss_history: list[float] = field(default_factory=list)
    rng: np.random.Generator | None = None
    stage1_done: bool = False

    def __post_init__(self):
        if self.rng is None:
            self.rng = seeded_rng(self.train.seed)


def sample_batch(rng: np.random.Generator, config, mode: str, batch_size: int) -> list[dict]:
    """Synthetic training batch; each entry owns a clip, noise draw, timestep,
    and condition."""
    batch = []
    for _ in range(batch_size):
        clip_seed = int(rng.integers(0, 2 ** 31))
        motion = float(rng.uniform(0.0, 1.0))
        clip = gen_latent_clip(
            clip_seed, motion, config.temporal_slices, config.spatial_h, config.spatial_w, config.channels
        )
        cond = gen_condition(clip_seed + 1, mode, config.cond_text_len, config.cond_dim, clip=clip)
        eps = rng.normal(size=clip.x0.shape)
        t = int(rng.integers(1, config.t_max + 1))
        batch.append({"x0": clip.x0, "eps": eps, "t": t, "cond": cond, "clip": clip})
    return batch


def _sample_block_ids(rng: np.random.Generator, n_blocks: int, count: int) -> list[int]:
    count = min(count, n_blocks)
    return sorted(int(i) for i in rng.choice(n_blocks, size=count, replace=False))


# ---------------------------------------------------------------------------
# stage steps
# ---------------------------------------------------------------------------


def _weighted_total(parts: dict, weights: LossWeights) -> Tensor:
    # left-fold so the reported total is reproducible from the reported parts
    total = tz.mul(parts["feat"], weights.feature)
    total = tz.add(total, tz.mul(parts["tfm"], weights.teacher_velocity))
    total = tz.add(total, tz.mul(parts["dfm"], weights.data_velocity))
    total = tz.add(total, tz.mul(parts["temp"], weights.temporal))
    return total


def stage1_step(state: TrainState, teacher: DiTParams, batch: list[dict], weights: LossWeights) -> dict:
    """One width-distillation update on the full (unrouted) student."""
    if state.router is not None:
        raise ContractError("stage one trains without a router; found router params in the state")
    config = state.student.config
    blocks = _sample_block_ids(state.rng, config.n_blocks, state.train.sampled_blocks)
    with Tape() as tape:
        parts = {"feat": None, "tfm": None, "dfm": None, "temp": None}
        for sample in batch:
            x_t = forward_process(sample["x0"], sample["eps"], sample["t"], config.t_max)
            with stop_recording():
                v_t, taps_t = dit_forward(teacher, x_t, sample["t"], sample["cond"], taps_requested=True)
            v_s, taps_s = dit_forward(state.student, x_t, sample["t"], sample["cond"], taps_requested=True)
            terms = {
                "feat": feature_loss(taps_t, taps_s, blocks),
                "tfm": teacher_velocity_loss(v_s, v_t),
                "dfm": data_velocity_loss(v_s, sample["x0"], sample["eps"]),
                "temp": temporal_loss(v_s, v_t),
            }
            for key, term in terms.items():
                parts[key] = term if parts[key] is None else tz.add(parts[key], term)
        for key in parts:
            parts[key] = tz.mul(parts[key], 1.0 / len(batch))
        total = _weighted_total(parts, weights)
        grads = tape.backward(total)

    if state.train.grad_clip:
        clip_grads(grads, state.train.grad_clip)
    lr = lr_schedule(state.step, state.train.lr_student, state.train.warmup, state.train.steps)
    state.opt_student.step(list(state.student.named()), grads, lr)
    state.step += 1
    loss_total = total.item()
    state.loss_history.append(loss_total)
    return {
        "step": state.step,
        "lr_student": lr,
        "lr_router": 0.0,
        "loss_total": loss_total,
        "loss_feat": parts["feat"].item(),
        "loss_tfm": parts["tfm"].item(),
        "loss_dfm": parts["dfm"].item(),
        "loss_temp": parts["temp"].item(),
        "mask_mean_K": float(config.n_blocks),
    }


def stage2_step(state: TrainState, teacher: DiTParams, batch: list[dict], weights: LossWeights) -> dict:
    """One joint width-routing update; feature matching only on active blocks."""
    if state.router is None or state.routing is None:
        raise ContractError("stage two needs router params in the state")
    config = state.student.config
    blocks = _sample_block_ids(state.rng, config.n_blocks, state.train.sampled_blocks)
    mask_sizes = []
    with Tape() as tape:
        parts = {"feat": None, "tfm": None, "dfm": None, "temp": None}
        for sample in batch:
            x_t = forward_process(sample["x0"], sample["eps"], sample["t"], config.t_max)
            with stop_recording():
                v_t, taps_t = dit_forward(teacher, x_t, sample["t"], sample["cond"], taps_requested=True)
            v_s, mask, taps_s = routed_forward(
                state.student,
                state.router,
                state.routing,
                x_t,
                sample["t"],
                sample["cond"],
                training=True,
                taps_requested=True,
            )
            mask_sizes.append(float(mask.hard.sum()))
            terms = {
                "feat": feature_loss(taps_t, taps_s, blocks, active_mask=mask.hard),
                "tfm": teacher_velocity_loss(v_s, v_t),
                "dfm": data_velocity_loss(v_s, sample["x0"], sample["eps"]),
                "temp": temporal_loss(v_s, v_t),
            }
            for key, term in terms.items():
                parts[key] = term if parts[key] is None else tz.add(parts[key], term)
        for key in parts:
            parts[key] = tz.mul(parts[key], 1.0 / len(batch))
        total = _weighted_total(parts, weights)
        grads = tape.backward(total)

    if state.train.grad_clip:
        clip_grads(grads, state.train.grad_clip)
    lr_s = lr_schedule(state.step, state.train.lr_student_stage2, state.train.warmup, state.train.steps)
    lr_r = lr_schedule(state.step, state.train.lr_router, state.train.warmup, state.train.steps)
    state.opt_student.step(list(state.student.named()), grads, lr_s)
    state.opt_router.step(list(state.router.named()), grads, lr_r)
    state.step += 1
    loss_total = total.item()
    state.loss_history.append(loss_total)
    return {
        "step": state.step,
        "lr_student": lr_s,
        "lr_router": lr_r,
        "loss_total": loss_total,
        "loss_feat": parts["feat"].item(),
        "loss_tfm": parts["tfm"].item(),
        "loss_dfm": parts["dfm"].item(),
        "loss_temp": parts["temp"].item(),
        "mask_mean_K": float(np.mean(mask_sizes)),
    }


# ---------------------------------------------------------------------------
# teacher pretraining (plain flow matching)
# ---------------------------------------------------------------------------


def train_teacher_step(params: DiTParams, opt: Adam, rng: np.random.Generator, train: TrainConfig) -> dict:
    from .model import flow_matching_loss

    batch = sample_batch(rng, params.config, params.mode, train.batch_size)
    with Tape() as tape:
        loss = flow_matching_loss(params, batch)
        grads = tape.backward(loss)
    if train.grad_clip:
        clip_grads(grads, train.grad_clip)
    lr = lr_schedule(opt.t, train.lr_student, train.warmup, train.steps)
    opt.step(list(params.named()), grads, lr)
    return {"loss_total": loss.item(), "lr_student": lr}


# ---------------------------------------------------------------------------
# logging and checkpoints
# ---------------------------------------------------------------------------


def append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def save_train_checkpoint(path: Path, state: TrainState, stage: int, extra_meta: dict | None = None) -> None:
    entries = {n: t.data for n, t in state.student.named()}
    entries.update(state.opt_student.state_entries("adam_student"))
    if state.router is not None:
        for n, t in state.router.named():
            entries[f"router.{n}"] = t.data
        entries.update(state.opt_router.state_entries("adam_router"))
    meta = {
        "stage": stage,
        "step": state.step,
        "opt_t": state.opt_student.t,
        "mode": state.student.mode,
        "stage1_done": state.stage1_done or stage == 1,
    }
    from dataclasses import asdict

    meta["config"] = asdict(state.student.config)
    if state.router is not None:
        meta["router"] = {
            "sin_dim": state.router.sin_dim,
            "content_dim": state.router.content_dim,
            "hidden_dim": state.router.hidden_dim,
            "n_blocks": state.router.n_blocks,
            "mode": state.router.mode,
        }
    if extra_meta:
        meta.update(extra_meta)
    save_archive(path, entries, meta=meta)


def smoothed(values: list[float], window: int = 10) -> list[float]:
    """Trailing-window mean; shorter prefixes average what exists."""
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(values[lo:i + 1])))
    return out
