"""Student construction: slice the retained sub-matrices out of the teacher.

Head slicing preserves original index order so each surviving head keeps its
projection rows/columns intact; attention over retained heads is unaffected
by removed ones, and the FFN is additive over neurons, so a student forward
matches the teacher with the pruned slices zeroed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PlanError
from .ffn import FFNSelection
from .heads import HeadSelection
from .model import AttnParams, BlockParams, DiTConfig, DiTParams
from .tensor import Tensor


@dataclass
class PruningPlan:
    heads: HeadSelection
    ffn: list[FFNSelection]  # one per block

    def to_dict(self) -> dict:
        return {
            "sa_retained": self.heads.sa_retained,
            "ca_retained": self.heads.ca_retained,
            "k_sa": self.heads.k_sa,
            "k_ca": self.heads.k_ca,
            "ffn": [s.to_dict() for s in self.ffn],
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "PruningPlan":
        heads = HeadSelection(
            sa_retained=[list(map(int, b)) for b in d["sa_retained"]],
            ca_retained=[list(map(int, b)) for b in d["ca_retained"]],
            k_sa=int(d["k_sa"]),
            k_ca=int(d["k_ca"]),
        )
        ffn = [
            FFNSelection(
                retained=list(map(int, s["retained"])),
                target_budget=int(s["target_budget"]),
                achieved_budget=int(s["achieved_budget"]),
                relaxation_trace=[float(x) for x in s["relaxation_trace"]],
                final_pass_unfiltered=bool(s.get("final_pass_unfiltered", False)),
            )
            for s in d["ffn"]
        ]
        return cls(heads=heads, ffn=ffn)

    @classmethod
    def from_json(cls, path: str | Path) -> "PruningPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def identity(cls, config: DiTConfig) -> "PruningPlan":
        """Retain everything; extract_student becomes a deep copy."""
        heads = HeadSelection(
            sa_retained=[list(range(config.sa_heads)) for _ in range(config.n_blocks)],
            ca_retained=[list(range(config.ca_heads)) for _ in range(config.n_blocks)],
            k_sa=config.sa_heads,
            k_ca=config.ca_heads,
        )
        ffn = [
            FFNSelection(
                retained=list(range(config.ffn_dim)),
                target_budget=config.ffn_dim,
                achieved_budget=config.ffn_dim,
                relaxation_trace=[1.0],
            )
            for _ in range(config.n_blocks)
        ]
        return cls(heads=heads, ffn=ffn)


@dataclass
class PlanViolation:
    block: int | None
    what: str


@dataclass
class PlanReport:
    violations: list[PlanViolation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_plan(config: DiTConfig, plan: PruningPlan, align_unit: int | None = None) -> PlanReport:
    """Collects every violation instead of failing on the first."""
    report = PlanReport()

    def check_heads(retained: list[list[int]], n_heads: int, k: int, kind: str) -> None:
        if len(retained) != config.n_blocks:
            report.violations.append(PlanViolation(None, f"{kind}: plan covers {len(retained)} blocks, config has {config.n_blocks}"))
            return
        for b, idxs in enumerate(retained):
            if not idxs:
                report.violations.append(PlanViolation(b, f"{kind}: no heads retained"))
                continue
            if len(set(idxs)) != len(idxs):
                report.violations.append(PlanViolation(b, f"{kind}: duplicate head indices {idxs}"))
            if any(not 0 <= j < n_heads for j in idxs):
                report.violations.append(PlanViolation(b, f"{kind}: head index out of range in {idxs}"))
            if len(idxs) != k:
                report.violations.append(PlanViolation(b, f"{kind}: retained {len(idxs)} heads, budget says {k}"))

    check_heads(plan.heads.sa_retained, config.sa_heads, plan.heads.k_sa, "sa")
    check_heads(plan.heads.ca_retained, config.ca_heads, plan.heads.k_ca, "ca")

    if len(plan.ffn) != config.n_blocks:
        report.violations.append(PlanViolation(None, f"ffn: plan covers {len(plan.ffn)} blocks, config has {config.n_blocks}"))
    for b, sel in enumerate(plan.ffn[: config.n_blocks]):
        if not sel.retained:
            report.violations.append(PlanViolation(b, "ffn: no neurons retained"))
            continue
        if len(set(sel.retained)) != len(sel.retained):
            report.violations.append(PlanViolation(b, "ffn: duplicate neuron indices"))
        if any(not 0 <= kk < config.ffn_dim for kk in sel.retained):
            report.violations.append(PlanViolation(b, "ffn: neuron index out of range"))
        if sel.achieved_budget != sel.target_budget:
            report.violations.append(PlanViolation(b, f"ffn: achieved {sel.achieved_budget} != target {sel.target_budget}"))
        if len(sel.retained) != sel.achieved_budget:
            report.violations.append(PlanViolation(b, f"ffn: retained {len(sel.retained)} != achieved budget {sel.achieved_budget}"))
        if align_unit and sel.target_budget % align_unit != 0:
            report.violations.append(PlanViolation(b, f"ffn: budget {sel.target_budget} not aligned to {align_unit}"))
    return report


def _slice_head_cols(w: np.ndarray, retained: list[int], head_dim: int) -> np.ndarray:
    cols = [c for j in retained for c in range(j * head_dim, (j + 1) * head_dim)]
    return w[:, cols]


def _slice_head_rows(w: np.ndarray, retained: list[int], head_dim: int) -> np.ndarray:
    rows = [r for j in retained for r in range(j * head_dim, (j + 1) * head_dim)]
    return w[rows, :]


def extract_student(teacher: DiTParams, plan: PruningPlan) -> DiTParams:
    """Materialize the width-pruned student. Residual width, norms,
    modulation, and the input/output projections are copied unchanged."""
    config = teacher.config
    report = validate_plan(config, plan)
    if not report.ok:
        first = report.violations[0]
        raise PlanError(f"plan does not validate ({len(report.violations)} violations; first: block={first.block} {first.what})")

    hd = config.head_dim
    blocks = []
    for i, blk in enumerate(teacher.blocks):
        sa_idx = plan.heads.sa_retained[i]
        ca_idx = plan.heads.ca_retained[i]
        ffn_idx = plan.ffn[i].retained
        sa = AttnParams(
            wq=Tensor(_slice_head_cols(blk.sa.wq.data, sa_idx, hd).copy()),
            wk=Tensor(_slice_head_cols(blk.sa.wk.data, sa_idx, hd).copy()),
            wv=Tensor(_slice_head_cols(blk.sa.wv.data, sa_idx, hd).copy()),
            wo=Tensor(_slice_head_rows(blk.sa.wo.data, sa_idx, hd).copy()),
        )
        streams = {}
        for name, sp in blk.ca_streams.items():
            streams[name] = AttnParams(
                wq=Tensor(_slice_head_cols(sp.wq.data, ca_idx, hd).copy()),
                wk=Tensor(_slice_head_cols(sp.wk.data, ca_idx, hd).copy()),
                wv=Tensor(_slice_head_cols(sp.wv.data, ca_idx, hd).copy()),
                wo=Tensor(_slice_head_rows(sp.wo.data, ca_idx, hd).copy()),
            )
        blocks.append(
            BlockParams(
                sa=sa,
                ca_streams=streams,
                w_up=Tensor(blk.w_up.data[:, ffn_idx].copy()),
                w_down=Tensor(blk.w_down.data[ffn_idx, :].copy()),
                norm_sa=Tensor(blk.norm_sa.data.copy()),
                norm_ca=Tensor(blk.norm_ca.data.copy()),
                norm_ffn=Tensor(blk.norm_ffn.data.copy()),
                mod_w=Tensor(blk.mod_w.data.copy()),
                mod_b=Tensor(blk.mod_b.data.copy()),
            )
        )
    return DiTParams(
        config=config,
        mode=teacher.mode,
        g1_w=Tensor(teacher.g1_w.data.copy()),
        g1_b=Tensor(teacher.g1_b.data.copy()),
        g2_w=Tensor(teacher.g2_w.data.copy()),
        g2_b=Tensor(teacher.g2_b.data.copy()),
        t_w1=Tensor(teacher.t_w1.data.copy()),
        t_b1=Tensor(teacher.t_b1.data.copy()),
        t_w2=Tensor(teacher.t_w2.data.copy()),
        t_b2=Tensor(teacher.t_b2.data.copy()),
        blocks=blocks,
    )


def masked_teacher(teacher: DiTParams, plan: PruningPlan) -> DiTParams:
    """Teacher with pruned head output-slices and pruned neuron row/columns
    zeroed; reference model for the masking-equivalence property."""
    config = teacher.config
    hd = config.head_dim
    masked = teacher.clone()
    for i, blk in enumerate(masked.blocks):
        keep_sa = set(plan.heads.sa_retained[i])
        for j in range(config.sa_heads):
            if j not in keep_sa:
                blk.sa.wo.data[j * hd:(j + 1) * hd, :] = 0.0
        keep_ca = set(plan.heads.ca_retained[i])
        for sp in blk.ca_streams.values():
            for j in range(config.ca_heads):
                if j not in keep_ca:
                    sp.wo.data[j * hd:(j + 1) * hd, :] = 0.0
        keep_ffn = set(plan.ffn[i].retained)
        for k in range(config.ffn_dim):
            if k not in keep_ffn:
                blk.w_up.data[:, k] = 0.0
                blk.w_down.data[k, :] = 0.0
    return masked
