"""Analytic multiply-accumulate accounting and the speedup projection.

Only matrix products are counted, matching the runtime counter, which hooks
matmul and nothing else; softmax, norms, activations, and rotary rotation are
excluded from both sides by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .model import DiTConfig, DiTParams, T_FEATURE_DIM, T_SIN_DIM


@dataclass
class CostLedger:
    c_embed: int
    c_block_full: int
    block_costs: list[int]
    retention: list[float]
    step_costs: list[float]
    retention_mean: float
    active_mean: float
    s_orig: float
    s_distill: float
    cfg_multiplier: float
    projected_speedup: float
    exact_per_step_ratio: float | None = None
    measured_vs_analytic: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "c_embed": self.c_embed,
            "c_block_full": self.c_block_full,
            "block_costs": self.block_costs,
            "retention": self.retention,
            "step_costs": self.step_costs,
            "retention_mean": self.retention_mean,
            "active_mean": self.active_mean,
            "s_orig": self.s_orig,
            "s_distill": self.s_distill,
            "cfg_multiplier": self.cfg_multiplier,
            "projected_speedup": self.projected_speedup,
            "exact_per_step_ratio": self.exact_per_step_ratio,
            "measured_vs_analytic": self.measured_vs_analytic,
        }


def _attn_flops(seq: int, kv_len: int, kd: int, d: int, key_dim: int) -> int:
    """QKV and output projections plus score and weighted-sum products for one
    attention with kd = retained_heads * head_dim."""
    q = 2 * seq * d * kd
    kv = 2 * 2 * kv_len * key_dim * kd
    out = 2 * seq * kd * d
    scores = 2 * kd * seq * kv_len
    weighted = 2 * kd * seq * kv_len
    return q + kv + out + scores + weighted


def block_flops(
    config: DiTConfig,
    mode: str,
    sa_heads: int | None = None,
    ca_heads: int | None = None,
    ffn_dim: int | None = None,
    seq_len: int | None = None,
) -> int:
    """Multiply-accumulate count of one block forward, counted as 2*m*k*n per
    matrix product. Defaults describe the unpruned teacher."""
    sa = sa_heads if sa_heads is not None else config.sa_heads
    ca = ca_heads if ca_heads is not None else config.ca_heads
    ffn = ffn_dim if ffn_dim is not None else config.ffn_dim
    seq = seq_len if seq_len is not None else config.tokens
    if not (0 < sa <= config.sa_heads and 0 < ca <= config.ca_heads and 0 < ffn <= config.ffn_dim):
        raise ContractError("retained widths exceed the config bounds")
    d = config.model_dim
    hd = config.head_dim
    total = _attn_flops(seq, seq, sa * hd, d, d)
    streams = 2 if mode == "i2v" else 1
    total += _attn_flops(seq, config.cond_text_len, ca * hd, d, config.cond_dim)
    if streams == 2:
        total += _attn_flops(seq, 1, ca * hd, d, config.cond_dim)
    total += 2 * 2 * seq * d * ffn
    total += 2 * T_FEATURE_DIM * 6 * d  # modulation projection
    return total


def embed_flops(config: DiTConfig) -> int:
    """Input/output projections and the timestep MLP."""
    seq = config.tokens
    return (
        2 * seq * config.channels * config.model_dim
        + 2 * seq * config.model_dim * config.channels
        + 2 * T_SIN_DIM * T_FEATURE_DIM
        + 2 * T_FEATURE_DIM * T_FEATURE_DIM
    )


def student_block_widths(student: DiTParams) -> list[tuple[int, int, int]]:
    hd = student.config.head_dim
    out = []
    for blk in student.blocks:
        sa = blk.sa.wq.shape[1] // hd
        ca = blk.ca_streams["text"].wq.shape[1] // hd
        out.append((sa, ca, blk.w_up.shape[1]))
    return out


def retention_fractions(student: DiTParams, mode: str) -> list[float]:
    """Per-block pruned/unpruned cost ratio."""
    config = student.config
    full = block_flops(config, mode)
    fractions = []
    for sa, ca, ffn in student_block_widths(student):
        fractions.append(block_flops(config, mode, sa, ca, ffn) / full)
    return fractions


def step_cost(masks: np.ndarray, retention: list[float], c_embed: float, c_block: float) -> list[float]:
    """C(t) = c_embed + sum_i m_i(t) * retention_i * c_block, per grid point."""
    masks = np.asarray(masks, dtype=np.float64)
    rho = np.asarray(retention, dtype=np.float64)
    if masks.ndim != 2 or masks.shape[1] != rho.shape[0]:
        raise ContractError(f"mask matrix shape {masks.shape} does not cover {rho.shape[0]} blocks")
    return [float(c_embed + (row * rho * c_block).sum()) for row in masks]


def speedup(n_blocks: int, retention_mean: float, active_mean: float, s_orig: float, s_distill: float, cfg_multiplier: float) -> float:
    """n / (mean retention * mean active blocks), times the step-reduction
    ratio and the guidance multiplier."""
    if min(n_blocks, retention_mean, active_mean, s_orig, s_distill, cfg_multiplier) <= 0:
        raise ContractError("speedup factors must all be positive")
    return n_blocks / (retention_mean * active_mean) * (s_orig / s_distill) * cfg_multiplier


def write_cost_json(ledger: CostLedger, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ledger.to_dict(), indent=2, sort_keys=True))
