"""Attention-head importance scoring, spatial/temporal classification,
temporal protection, and per-block head selection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CalibrationSet
from .errors import ConfigError, ContractError
from .model import DiTParams, ForwardTaps, dit_forward, forward_process
from .tensor import stop_recording


@dataclass
class HeadReport:
    block: int
    head: int
    kind: str  # "sa" | "ca"
    raw_score: float
    intra_ratio: float | None = None  # sa only
    head_type: str | None = None  # "spatial" | "mixed" | "temporal", sa only
    adjusted_score: float | None = None


@dataclass
class HeadSelection:
    sa_retained: list[list[int]]
    ca_retained: list[list[int]]
    k_sa: int
    k_ca: int


def timestep_weight(t: float, t_max: float) -> float:
    """log(1 + t/t_max): upweights high-noise steps during calibration."""
    if not 0 <= t <= t_max:
        raise ContractError(f"timestep {t} outside [0, {t_max}]")
    return math.log1p(t / t_max)


def head_output_norm(wo: np.ndarray, head: int, head_dim: int) -> float:
    """Frobenius norm of one head's slice of the output projection."""
    return float(np.linalg.norm(wo[head * head_dim:(head + 1) * head_dim, :]))


def calibration_forwards(teacher: DiTParams, calib: CalibrationSet):
    """One instrumented forward per (sample, bin); yields (t, taps).

    Calibration noise is drawn deterministically from each clip's seed, so
    scoring is reproducible for a fixed calibration set."""
    t_max = teacher.config.t_max
    with stop_recording():
        for clip, cond in calib.samples:
            eps_rng = np.random.Generator(np.random.PCG64(clip.seed ^ 0x9E3779B9))
            eps = eps_rng.normal(size=clip.x0.shape)
            for t in calib.t_bins:
                x_t = forward_process(clip.x0, eps, t, t_max)
                _, taps = dit_forward(teacher, x_t, t, cond, taps_requested=True)
                yield t, taps


def score_sa_heads(teacher: DiTParams, calib: CalibrationSet) -> list[HeadReport]:
    """Calibration-aggregated importance: timestep weight times the Frobenius
    norms of the head's attention-weighted values and its output slice,
    averaged over calibration samples (summed over timestep bins)."""
    config = teacher.config
    head_dim = config.head_dim
    scores = np.zeros((config.n_blocks, config.sa_heads))
    ratios = np.zeros((config.n_blocks, config.sa_heads))
    n_forwards = 0
    queries = query_sample(config.tokens)
    for t, taps in calibration_forwards(teacher, calib):
        w = timestep_weight(t, config.t_max)
        n_forwards += 1
        for i in range(config.n_blocks):
            wv = taps.sa_weighted_v[i].data  # (heads, tokens, head_dim)
            wo = teacher.blocks[i].sa.wo.data
            for j in range(config.sa_heads):
                scores[i, j] += w * np.linalg.norm(wv[j]) * head_output_norm(wo, j, head_dim)
                ratios[i, j] += intra_slice_ratio(taps, i, j, queries, config.spatial_tokens)
    n_samples = len(calib.samples)
    scores /= n_samples
    ratios /= n_forwards
    return [
        HeadReport(block=i, head=j, kind="sa", raw_score=float(scores[i, j]), intra_ratio=float(ratios[i, j]))
        for i in range(config.n_blocks)
        for j in range(config.sa_heads)
    ]


def score_ca_heads(teacher: DiTParams, calib: CalibrationSet) -> list[HeadReport]:
    """Cross-attention analog; stream contributions (text, image) are summed."""
    config = teacher.config
    head_dim = config.head_dim
    scores = np.zeros((config.n_blocks, config.ca_heads))
    for t, taps in calibration_forwards(teacher, calib):
        w = timestep_weight(t, config.t_max)
        for i in range(config.n_blocks):
            blk = teacher.blocks[i]
            for stream, wv_t in taps.ca_weighted_v[i].items():
                wv = wv_t.data
                wo = blk.ca_streams[stream].wo.data
                for j in range(config.ca_heads):
                    scores[i, j] += w * np.linalg.norm(wv[j]) * head_output_norm(wo, j, head_dim)
    scores /= len(calib.samples)
    return [
        HeadReport(block=i, head=j, kind="ca", raw_score=float(scores[i, j]))
        for i in range(config.n_blocks)
        for j in range(config.ca_heads)
    ]


def query_sample(n_tokens: int, limit: int = 64) -> list[int]:
    """Up to ``limit`` query positions, evenly strided so every slice is hit."""
    if n_tokens <= limit:
        return list(range(n_tokens))
    stride = n_tokens / limit
    return sorted({int(i * stride) for i in range(limit)})


def intra_slice_ratio(taps: ForwardTaps, block: int, head: int, queries: list[int], spatial_tokens: int) -> float:
    """Fraction of a head's attention mass landing inside the query's own
    temporal slice, averaged over the sampled query positions."""
    if not queries:
        raise ContractError("query sample must be nonempty")
    attn = taps.sa_attn[block].data[head]  # (tokens, tokens)
    total = 0.0
    for q in queries:
        if not 0 <= q < attn.shape[0]:
            raise ContractError(f"query index {q} out of range for {attn.shape[0]} tokens")
        s = (q // spatial_tokens) * spatial_tokens
        row = attn[q]
        denom = row.sum()  # 1 for post-softmax rows, computed anyway
        total += row[s:s + spatial_tokens].sum() / denom
    return total / len(queries)


def classify_head(r: float, tau_s: float = 0.7, tau_t: float = 0.3) -> str:
    """spatial above tau_s, temporal below tau_t, mixed otherwise
    (boundaries are mixed: the comparisons are strict)."""
    if not 0 <= tau_t < tau_s <= 1:
        raise ConfigError(f"need 0 <= tau_t < tau_s <= 1, got tau_t={tau_t}, tau_s={tau_s}")
    if r > tau_s:
        return "spatial"
    if r < tau_t:
        return "temporal"
    return "mixed"


def classify_reports(reports: list[HeadReport], tau_s: float, tau_t: float) -> None:
    for rep in reports:
        if rep.kind == "sa":
            rep.head_type = classify_head(rep.intra_ratio, tau_s, tau_t)


def apply_temporal_protection(reports: list[HeadReport], temporal_boost: float) -> list[HeadReport]:
    """Scale temporal-head scores by the protection multiplier. Refuses to run
    twice on the same reports."""
    if temporal_boost < 1.0:
        raise ContractError(f"temporal protection multiplier must be >= 1, got {temporal_boost}")
    if any(rep.adjusted_score is not None for rep in reports):
        raise ContractError("adjusted scores already present; protection must be applied exactly once")
    for rep in reports:
        if rep.head_type == "temporal":
            rep.adjusted_score = rep.raw_score * temporal_boost
        else:
            rep.adjusted_score = rep.raw_score
    return reports


def retained_count(n_heads: int, prune_ratio: float, k_min: int) -> int:
    if not 0 <= prune_ratio < 1:
        raise ContractError(f"prune ratio must be in [0, 1), got {prune_ratio}")
    if k_min < 1:
        raise ContractError(f"k_min must be >= 1, got {k_min}")
    k = max(k_min, math.ceil(n_heads * (1.0 - prune_ratio)))
    if k > n_heads:
        raise ContractError(f"retained count {k} exceeds head count {n_heads}")
    return k


def select_heads_one_kind(reports: list[HeadReport], prune_ratio: float, k_min: int) -> tuple[list[list[int]], int]:
    """Top-K per block by adjusted score; ties break toward the lower index."""
    if any(rep.adjusted_score is None for rep in reports):
        raise ContractError("reports need adjusted scores before selection")
    blocks = sorted({rep.block for rep in reports})
    per_block: list[list[int]] = []
    n_heads = None
    k = None
    for b in blocks:
        rows = sorted((rep for rep in reports if rep.block == b), key=lambda rep: rep.head)
        if n_heads is None:
            n_heads = len(rows)
            k = retained_count(n_heads, prune_ratio, k_min)
        elif len(rows) != n_heads:
            raise ContractError(f"block {b} has {len(rows)} reports, expected {n_heads}")
        order = sorted(range(n_heads), key=lambda j: (-rows[j].adjusted_score, j))
        per_block.append(sorted(order[:k]))
    return per_block, k


def select_heads(
    sa_reports: list[HeadReport],
    ca_reports: list[HeadReport],
    p_sa: float,
    p_ca: float,
    k_min: int,
) -> HeadSelection:
    sa_retained, k_sa = select_heads_one_kind(sa_reports, p_sa, k_min)
    ca_retained, k_ca = select_heads_one_kind(ca_reports, p_ca, k_min)
    return HeadSelection(sa_retained=sa_retained, ca_retained=ca_retained, k_sa=k_sa, k_ca=k_ca)


def head_type_histogram(reports: list[HeadReport]) -> dict[int, dict[str, int]]:
    """Per-block counts of spatial/mixed/temporal heads (sa reports only)."""
    hist: dict[int, dict[str, int]] = {}
    for rep in reports:
        if rep.kind != "sa":
            continue
        if rep.head_type is None:
            raise ContractError("classify reports before building the histogram")
        row = hist.setdefault(rep.block, {"spatial": 0, "mixed": 0, "temporal": 0})
        row[rep.head_type] += 1
    return hist


def write_report_csv(reports: list[HeadReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "head", "kind", "raw_score", "intra_ratio", "type", "adjusted_score"])
        for rep in reports:
            w.writerow(
                [
                    rep.block,
                    rep.head,
                    rep.kind,
                    f"{rep.raw_score:.12g}",
                    "" if rep.intra_ratio is None else f"{rep.intra_ratio:.12g}",
                    rep.head_type or "",
                    "" if rep.adjusted_score is None else f"{rep.adjusted_score:.12g}",
                ]
            )


def write_histogram_csv(hist: dict[int, dict[str, int]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "spatial", "mixed", "temporal"])
        for block in sorted(hist):
            row = hist[block]
            w.writerow([block, row["spatial"], row["mixed"], row["temporal"]])
