"""FFN neuron importance and diversity-aware greedy selection.

Neuron k is scored by the product of the norms of its up-projection row and
down-projection column, a purely structural criterion. Selection walks
candidates by descending importance and skips any neuron too similar to one
already kept, progressively relaxing the similarity threshold until the
budget is met.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError

RELAX_STEP = 0.05


@dataclass
class NeuronRecord:
    block: int
    neuron: int
    importance: float
    signature: np.ndarray  # concat of up row and down column, length 2*model_dim


@dataclass
class FFNSelection:
    retained: list[int]  # ascending
    target_budget: int
    achieved_budget: int
    relaxation_trace: list[float]
    final_pass_unfiltered: bool = False

    def to_dict(self) -> dict:
        return {
            "retained": self.retained,
            "target_budget": self.target_budget,
            "achieved_budget": self.achieved_budget,
            "relaxation_trace": self.relaxation_trace,
            "final_pass_unfiltered": self.final_pass_unfiltered,
        }


def ffn_importance(w_up: np.ndarray, w_down: np.ndarray, k: int) -> float:
    """Norm of w_up's k-th row times norm of w_down's k-th column."""
    n = w_up.shape[0]
    if not 0 <= k < n or w_down.shape[1] != n:
        raise ContractError(f"neuron index {k} out of range for shapes {w_up.shape}/{w_down.shape}")
    return float(np.linalg.norm(w_up[k, :]) * np.linalg.norm(w_down[:, k]))


def neuron_records(block: int, w_up: np.ndarray, w_down: np.ndarray) -> list[NeuronRecord]:
    """Records for every neuron; w_up rows and w_down columns index neurons."""
    if w_up.shape[0] != w_down.shape[1]:
        raise ContractError(f"neuron counts disagree: {w_up.shape} vs {w_down.shape}")
    up_norms = np.linalg.norm(w_up, axis=1)
    down_norms = np.linalg.norm(w_down, axis=0)
    return [
        NeuronRecord(
            block=block,
            neuron=k,
            importance=float(up_norms[k] * down_norms[k]),
            signature=np.concatenate([w_up[k, :], w_down[:, k]]),
        )
        for k in range(w_up.shape[0])
    ]


def align_budget(raw_budget: float, unit: int) -> int:
    """Round the budget up to the next multiple of the alignment unit."""
    if unit < 1:
        raise ContractError(f"alignment unit must be >= 1, got {unit}")
    if raw_budget <= 0:
        raise ContractError(f"budget must be positive, got {raw_budget}")
    return unit * math.ceil(raw_budget / unit)


def _max_similarity(sig: np.ndarray, sig_norm: float, kept: list[NeuronRecord], kept_norms: list[float]) -> float:
    """Max cosine similarity to the kept set; exact duplicates count as +inf
    so they stay skipped even at threshold 1."""
    best = -1.0
    for rec, nrm in zip(kept, kept_norms):
        if sig.shape == rec.signature.shape and np.array_equal(sig, rec.signature):
            return math.inf
        denom = sig_norm * nrm
        if denom == 0.0:
            continue
        best = max(best, float(np.dot(sig, rec.signature) / denom))
    return best


def greedy_diverse_select(records: list[NeuronRecord], budget: int, tau: float) -> FFNSelection:
    """Importance-ranked greedy selection with a cosine-similarity skip rule.

    Candidates are visited in descending importance (ties toward the lower
    index). A candidate is skipped while its max similarity to the kept set
    exceeds the current threshold. Unfilled budgets relax the threshold by
    0.05 per pass, revisiting skips in the original order; a terminal pass
    with the similarity test disabled guarantees termination.
    """
    if budget > len(records):
        raise ContractError(f"budget {budget} exceeds neuron count {len(records)}")
    if not 0.0 < tau <= 1.0:
        raise ContractError(f"similarity threshold must be in (0, 1], got {tau}")
    order = sorted(records, key=lambda r: (-r.importance, r.neuron))
    kept: list[NeuronRecord] = []
    kept_norms: list[float] = []
    selected_ids: set[int] = set()
    trace: list[float] = []
    final_unfiltered = False

    current = tau
    while True:
        trace.append(current)
        for rec in order:
            if len(kept) == budget:
                break
            if rec.neuron in selected_ids:
                continue
            sig_norm = float(np.linalg.norm(rec.signature))
            if _max_similarity(rec.signature, sig_norm, kept, kept_norms) > current:
                continue
            kept.append(rec)
            kept_norms.append(sig_norm)
            selected_ids.add(rec.neuron)
        if len(kept) == budget:
            break
        if current >= 1.0:
            final_unfiltered = True
            for rec in order:
                if len(kept) == budget:
                    break
                if rec.neuron in selected_ids:
                    continue
                kept.append(rec)
                kept_norms.append(float(np.linalg.norm(rec.signature)))
                selected_ids.add(rec.neuron)
            break
        current = min(1.0, current + RELAX_STEP)

    return FFNSelection(
        retained=sorted(rec.neuron for rec in kept),
        target_budget=budget,
        achieved_budget=len(kept),
        relaxation_trace=trace,
        final_pass_unfiltered=final_unfiltered,
    )


def select_ffn(w_up: np.ndarray, w_down: np.ndarray, block: int, prune_ratio: float, tau: float, unit: int) -> FFNSelection:
    """Align the retention target up to the unit, then select to it."""
    records = neuron_records(block, w_up, w_down)
    n = len(records)
    target = align_budget(n * (1.0 - prune_ratio), unit)
    if target > n:
        raise ContractError(f"aligned budget {target} exceeds ffn width {n}")
    return greedy_diverse_select(records, target, tau)


def write_selection_json(selections: list[FFNSelection], path: str | Path) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in selections], indent=2))
