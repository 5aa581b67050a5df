"""Command-line pipeline: teach, calibrate, prune, train, report.

Every command writes its outputs (plus the fully resolved config) into its
own subdirectory under the output root and refuses to overwrite existing
outputs unless forced. Exit codes: 0 ok, 2 config error, 3 contract
violation, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import cost as costmod
from . import distill, heads, router as routermod
from .archive import load_archive
from .config import PipelineConfig, apply_overrides, load_config
from .data import build_calibration_set, gen_condition, gen_latent_clip
from .distill import Adam, TrainState, append_jsonl, save_train_checkpoint
from .errors import ConfigError, ContractError
from .ffn import select_ffn
from .model import DiTParams, dit_forward, forward_process, init_params, load_params, params_from_entries, save_params
from .router import RouterParams, activation_frequency, init_router, routed_forward
from .surgery import PruningPlan, extract_student, validate_plan
from .tensor import count_flops, stop_recording

log = logging.getLogger("ditslim")

OUT_ROOT_ENV = "DITSLIM_OUT_ROOT"


def _out_root(args) -> Path:
    root = args.out_root or os.environ.get(OUT_ROOT_ENV) or "runs"
    return Path(root)


def _prepare_dir(root: Path, name: str, outputs: list[str], force: bool) -> Path:
    d = root / name
    d.mkdir(parents=True, exist_ok=True)
    for out in outputs:
        p = d / out
        if p.exists() and not force:
            raise FileExistsError(f"{p} exists; re-run with --force to overwrite")
    return d


def _load_pipeline_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_teach(args) -> int:
    cfg = _load_pipeline_config(args)
    root = _out_root(args)
    out = _prepare_dir(root, "teacher", ["teacher.tarc", "log.jsonl", "config.resolved.json"], args.force)
    cfg.echo(out / "config.resolved.json")
    log_path = out / "log.jsonl"
    log_path.write_text("")

    params = init_params(cfg.model, cfg.mode, seed=cfg.teacher.seed)
    opt = Adam()
    rng = distill.seeded_rng(cfg.teacher.seed)
    tc = distill.TrainConfig(
        steps=cfg.teacher.steps,
        warmup=cfg.teacher.warmup,
        lr_student=cfg.teacher.lr,
        batch_size=cfg.teacher.batch_size,
        seed=cfg.teacher.seed,
    )
    for step in range(cfg.teacher.steps):
        rec = distill.train_teacher_step(params, opt, rng, tc)
        rec["step"] = step + 1
        append_jsonl(log_path, rec)
    save_params(out / "teacher.tarc", params, meta={"steps": cfg.teacher.steps, "seed": cfg.teacher.seed})
    log.info("teacher trained for %d steps; final loss %.4f", cfg.teacher.steps, rec["loss_total"])
    return 0


def _teacher_path(args, root: Path) -> Path:
    return Path(args.teacher) if getattr(args, "teacher", None) else root / "teacher" / "teacher.tarc"


def cmd_calibrate(args) -> int:
    cfg = _load_pipeline_config(args)
    root = _out_root(args)
    out = _prepare_dir(root, "calibrate", ["head_report.csv", "head_types.csv", "config.resolved.json"], args.force)
    cfg.echo(out / "config.resolved.json")

    teacher, _ = load_params(_teacher_path(args, root))
    calib = build_calibration_set(
        cfg.calibration.n_samples,
        cfg.calibration.n_bins,
        seed=cfg.training.seed,
        mode=cfg.mode,
        t_max=cfg.model.t_max,
        temporal_slices=cfg.model.temporal_slices,
        height=cfg.model.spatial_h,
        width=cfg.model.spatial_w,
        channels=cfg.model.channels,
        cond_text_len=cfg.model.cond_text_len,
        cond_dim=cfg.model.cond_dim,
    )
    sa_reports = heads.score_sa_heads(teacher, calib)
    ca_reports = heads.score_ca_heads(teacher, calib)
    heads.classify_reports(sa_reports, cfg.pruning.spatial_threshold, cfg.pruning.temporal_threshold)
    heads.apply_temporal_protection(sa_reports + ca_reports, cfg.pruning.temporal_boost)
    heads.write_report_csv(sa_reports + ca_reports, out / "head_report.csv")
    heads.write_histogram_csv(heads.head_type_histogram(sa_reports), out / "head_types.csv")
    log.info("calibration written: %d head reports", len(sa_reports) + len(ca_reports))
    return 0


def cmd_prune(args) -> int:
    cfg = _load_pipeline_config(args)
    root = _out_root(args)
    out = _prepare_dir(root, "prune", ["plan.json", "student_raw.tarc", "config.resolved.json"], args.force)
    cfg.echo(out / "config.resolved.json")

    teacher, _ = load_params(_teacher_path(args, root))
    reports_csv = Path(args.reports) if args.reports else root / "calibrate" / "head_report.csv"
    sa_reports, ca_reports = _reports_from_csv(reports_csv)
    selection = heads.select_heads(
        sa_reports, ca_reports, cfg.pruning.sa_ratio, cfg.pruning.ca_ratio, cfg.pruning.min_heads
    )
    ffn_selections = [
        select_ffn(
            blk.w_up.data.T,
            blk.w_down.data.T,
            block=i,
            prune_ratio=cfg.pruning.ffn_ratio,
            tau=cfg.pruning.similarity_threshold,
            unit=cfg.pruning.align_unit,
        )
        for i, blk in enumerate(teacher.blocks)
    ]
    plan = PruningPlan(heads=selection, ffn=ffn_selections)
    report = validate_plan(cfg.model, plan, align_unit=cfg.pruning.align_unit)
    if not report.ok:
        raise ContractError(f"pruning plan invalid: {[f'{v.block}:{v.what}' for v in report.violations]}")
    student = extract_student(teacher, plan)
    reduction = 100.0 * (1.0 - student.param_count() / teacher.param_count())
    plan.to_json(out / "plan.json")
    save_params(out / "student_raw.tarc", student, meta={"plan": plan.to_dict(), "provenance": "raw_pruned"})
    print(f"parameter reduction: {reduction:.2f}%")
    log.info("pruned student written (%.2f%% fewer parameters)", reduction)
    return 0


def _reports_from_csv(path: Path) -> tuple[list[heads.HeadReport], list[heads.HeadReport]]:
    import csv as csvmod

    sa, ca = [], []
    with open(path) as fh:
        for row in csvmod.DictReader(fh):
            rep = heads.HeadReport(
                block=int(row["block"]),
                head=int(row["head"]),
                kind=row["kind"],
                raw_score=float(row["raw_score"]),
                intra_ratio=float(row["intra_ratio"]) if row["intra_ratio"] else None,
                head_type=row["type"] or None,
                adjusted_score=float(row["adjusted_score"]) if row["adjusted_score"] else None,
            )
            (sa if rep.kind == "sa" else ca).append(rep)
    return sa, ca


def cmd_train(args) -> int:
    cfg = _load_pipeline_config(args)
    root = _out_root(args)
    stage = args.stage

    # resolve and validate the initialization source before touching any output
    teacher, _ = load_params(_teacher_path(args, root))
    state, init_events = _build_train_state(cfg, root, stage, args)

    outputs = ["student.tarc", "log.jsonl", "config.resolved.json"]
    out = _prepare_dir(root, f"stage{stage}", [] if args.resume else outputs, args.force or bool(args.resume))
    cfg.echo(out / "config.resolved.json")
    log_path = out / "log.jsonl"
    if not args.resume:
        log_path.write_text("")
        for event in init_events:
            append_jsonl(log_path, event)

    weights = cfg.weights
    rng = state.rng
    step_fn = distill.stage1_step if stage == 1 else distill.stage2_step
    interval = cfg.training.checkpoint_interval
    while state.step < cfg.training.steps:
        batch = distill.sample_batch(rng, cfg.model, cfg.mode, cfg.training.batch_size)
        rec = step_fn(state, teacher, batch, weights)
        append_jsonl(log_path, rec)
        if interval and state.step % interval == 0 and state.step < cfg.training.steps:
            save_train_checkpoint(out / "student.tarc", state, stage)
    save_train_checkpoint(out / "student.tarc", state, stage)
    log.info("stage %d finished at step %d", stage, state.step)
    return 0


def _build_train_state(cfg: PipelineConfig, root: Path, stage: int, args) -> tuple[TrainState, list[dict]]:
    resume_path = root / f"stage{stage}" / "student.tarc"
    if args.resume:
        if not resume_path.exists():
            raise ContractError(f"cannot resume: {resume_path} does not exist")
        return _state_from_checkpoint(cfg, resume_path, stage), []

    if stage == 1:
        student, _ = load_params(root / "prune" / "student_raw.tarc")
        state = TrainState(
            student=student,
            router=None,
            routing=None,
            opt_student=Adam(),
            opt_router=None,
            train=cfg.training,
        )
        return state, []

    # stage 2: start from the stage-1 checkpoint unless explicitly allowed raw
    stage1_path = root / "stage1" / "student.tarc"
    if stage1_path.exists():
        entries, _ = load_archive(stage1_path)
        student_entries = {k: v for k, v in entries.items() if not k.startswith(("adam_", "router."))}
        student = params_from_entries(cfg.model, cfg.mode, student_entries)
        provenance = "stage1"
    elif args.allow_raw:
        student, _ = load_params(root / "prune" / "student_raw.tarc")
        provenance = "raw_pruned"
        log.warning("stage 2 starting from the RAW pruned student (--allow-raw); expect weaker results")
    else:
        raise ContractError("stage 2 needs a stage-1 checkpoint; pass --allow-raw to start from the raw pruned student")

    rp = init_router(
        (cfg.model.cond_dim, cfg.mode),
        cfg.routing,
        cfg.model.n_blocks,
        seed=cfg.training.seed + 1,
        channels=cfg.model.channels,
    )
    state = TrainState(
        student=student,
        router=rp,
        routing=cfg.routing,
        opt_student=Adam(),
        opt_router=Adam(),
        train=cfg.training,
        stage1_done=provenance == "stage1",
    )
    events = [{"event": "init", "provenance": provenance}]
    if provenance != "stage1":
        events.append({"event": "warning", "what": "initialized from raw pruned weights without width distillation"})
    return state, events


def _state_from_checkpoint(cfg: PipelineConfig, path: Path, stage: int) -> TrainState:
    entries, meta = load_archive(path)
    student_entries = {k: v for k, v in entries.items() if not k.startswith(("adam_", "router."))}
    student = params_from_entries(cfg.model, cfg.mode, student_entries)
    opt_s = Adam()
    opt_s.load_state("adam_student", entries, int(meta["opt_t"]))
    router = None
    opt_r = None
    if stage == 2:
        router = routermod.router_from_entries(entries, meta["router"], prefix="router.")
        opt_r = Adam()
        opt_r.load_state("adam_router", entries, int(meta["opt_t"]))
    state = TrainState(
        student=student,
        router=router,
        routing=cfg.routing if stage == 2 else None,
        opt_student=opt_s,
        opt_router=opt_r,
        train=cfg.training,
        step=int(meta["step"]),
        stage1_done=bool(meta.get("stage1_done", False)),
    )
    # replay the RNG to the stored step so resumed runs draw fresh batches
    for _ in range(int(meta["step"])):
        distill.sample_batch(state.rng, cfg.model, cfg.mode, cfg.training.batch_size)
        state.rng.choice(cfg.model.n_blocks, size=min(cfg.training.sampled_blocks, cfg.model.n_blocks), replace=False)
    return state


def heldout_eval_set(cfg: PipelineConfig, n: int = 8, seed: int = 10_007) -> list[dict]:
    """Fixed evaluation samples disjoint from the training stream by seed."""
    samples = []
    rng = distill.seeded_rng(seed)
    for i in range(n):
        clip_seed = seed + 7919 * (i + 1)
        motion = (i + 0.5) / n
        clip = gen_latent_clip(
            clip_seed, motion, cfg.model.temporal_slices, cfg.model.spatial_h, cfg.model.spatial_w, cfg.model.channels
        )
        cond = gen_condition(clip_seed + 1, cfg.mode, cfg.model.cond_text_len, cfg.model.cond_dim, clip=clip)
        eps = rng.normal(size=clip.x0.shape)
        samples.append({"x0": clip.x0, "eps": eps, "cond": cond})
    return samples


def heldout_mse(teacher: DiTParams, forward_fn, cfg: PipelineConfig, samples: list[dict], t_grid: list[int]) -> float:
    """Mean-square gap between teacher velocity and a candidate forward."""
    total = 0.0
    count = 0
    with stop_recording():
        for sample in samples:
            for t in t_grid:
                x_t = forward_process(sample["x0"], sample["eps"], t, cfg.model.t_max)
                v_t, _ = dit_forward(teacher, x_t, t, sample["cond"])
                v_c = forward_fn(x_t, t, sample["cond"])
                total += float(np.mean((v_c.data - v_t.data) ** 2))
                count += 1
    return total / count


def cmd_report(args) -> int:
    cfg = _load_pipeline_config(args)
    root = _out_root(args)
    out = _prepare_dir(root, "report", ["activation.csv", "cost.json", "summary.json", "config.resolved.json"], args.force)
    cfg.echo(out / "config.resolved.json")

    teacher, _ = load_params(_teacher_path(args, root))
    raw_student, _ = load_params(root / "prune" / "student_raw.tarc")
    entries, meta = load_archive(root / "stage2" / "student.tarc")
    student_entries = {k: v for k, v in entries.items() if not k.startswith(("adam_", "router."))}
    student = params_from_entries(cfg.model, cfg.mode, student_entries)
    rp = routermod.router_from_entries(entries, meta["router"], prefix="router.")

    t_grid = [max(1, round((i + 0.5) * cfg.model.t_max / 10)) for i in range(10)]
    eval_samples = heldout_eval_set(cfg)
    content_inputs = []
    for sample in eval_samples:
        x_mid = forward_process(sample["x0"], sample["eps"], t_grid[len(t_grid) // 2], cfg.model.t_max)
        content_inputs.append({"cond": sample["cond"], "x_t": x_mid})
    freq = activation_frequency(rp, cfg.routing, cfg.model.t_max, cfg.model.n_blocks, t_grid, content_inputs)
    routermod.write_frequency_csv(freq, t_grid, out / "activation.csv")

    ledger = measure_cost(cfg, student, rp, t_grid, eval_samples)
    costmod.write_cost_json(ledger, out / "cost.json")

    def routed(x_t, t, cond):
        v, _, _ = routed_forward(student, rp, cfg.routing, x_t, t, cond, training=False)
        return v

    def full(params):
        def fn(x_t, t, cond):
            v, _ = dit_forward(params, x_t, t, cond)
            return v

        return fn

    mse_grid = [t_grid[1], t_grid[len(t_grid) // 2], t_grid[-2]]
    summary = {
        "heldout_mse_stage2_routed": heldout_mse(teacher, routed, cfg, eval_samples, mse_grid),
        "heldout_mse_raw_pruned": heldout_mse(teacher, full(raw_student), cfg, eval_samples, mse_grid),
        "projected_speedup": ledger.projected_speedup,
        "retention_mean": ledger.retention_mean,
        "active_blocks_mean": ledger.active_mean,
        "param_reduction_pct": 100.0 * (1.0 - student.param_count() / teacher.param_count()),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    log.info("report written: speedup %.2f, stage2 mse %.5f", ledger.projected_speedup, summary["heldout_mse_stage2_routed"])
    return 0


def measure_cost(cfg: PipelineConfig, student: DiTParams, rp: RouterParams, t_grid: list[int], eval_samples: list[dict]):
    """Analytic ledger plus an instrumented cross-check on a routed run."""
    retention = costmod.retention_fractions(student, cfg.mode)
    c_embed = costmod.embed_flops(cfg.model)
    c_block = costmod.block_flops(cfg.model, cfg.mode)

    masks = []
    measured = []
    with stop_recording():
        for t in t_grid:
            sample = eval_samples[t % len(eval_samples)]
            x_t = forward_process(sample["x0"], sample["eps"], t, cfg.model.t_max)
            with count_flops() as counter:
                _, mask, _ = routed_forward(student, rp, cfg.routing, x_t, t, sample["cond"], training=False)
            masks.append(mask.hard)
            # router and content-projection cost is not part of the block model
            router_cost = _router_flops(rp)
            measured.append(counter.total - router_cost)
    masks = np.stack(masks)
    analytic = costmod.step_cost(masks, retention, c_embed, c_block)
    rho_mean = float(np.mean(retention))
    k_mean = float(masks.sum(axis=1).mean())
    projected = costmod.speedup(
        cfg.model.n_blocks, rho_mean, k_mean, cfg.cost.s_orig, cfg.cost.s_distill, cfg.cost.cfg_multiplier
    )
    full_cost = c_embed + cfg.model.n_blocks * c_block
    exact_ratio = float(np.mean([full_cost / c for c in analytic]))
    deltas = [abs(m - a) / a for m, a in zip(measured, analytic)]
    return costmod.CostLedger(
        c_embed=c_embed,
        c_block_full=c_block,
        block_costs=[costmod.block_flops(cfg.model, cfg.mode, sa, ca, ffn) for sa, ca, ffn in costmod.student_block_widths(student)],
        retention=retention,
        step_costs=analytic,
        retention_mean=rho_mean,
        active_mean=k_mean,
        s_orig=cfg.cost.s_orig,
        s_distill=cfg.cost.s_distill,
        cfg_multiplier=cfg.cost.cfg_multiplier,
        projected_speedup=projected,
        exact_per_step_ratio=exact_ratio,
        measured_vs_analytic={
            "measured": measured,
            "analytic": analytic,
            "max_rel_delta": max(deltas),
        },
    )


def _router_flops(rp: RouterParams) -> int:
    din = rp.sin_dim + rp.content_dim
    content_in = rp.wc.shape[0]
    return 2 * (content_in * rp.content_dim + din * rp.hidden_dim + rp.hidden_dim * rp.hidden_dim + rp.hidden_dim * rp.n_blocks)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ditslim", description="toy video-DiT compression pipeline")
    parser.add_argument("--config", help="pipeline config JSON; defaults apply when omitted")
    parser.add_argument("--out-root", help=f"output root (or ${OUT_ROOT_ENV})")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VAL", help="dotted config override")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("teach", help="train the toy teacher on synthetic data")
    p = sub.add_parser("calibrate", help="score and classify attention heads")
    p.add_argument("--teacher", help="teacher checkpoint path")
    p = sub.add_parser("prune", help="build the pruning plan and extract the student")
    p.add_argument("--teacher", help="teacher checkpoint path")
    p.add_argument("--reports", help="head report CSV from calibrate")
    p = sub.add_parser("train", help="run a distillation stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--allow-raw", action="store_true", help="let stage 2 start from the raw pruned student")
    p.add_argument("--resume", action="store_true", help="continue from this stage's checkpoint")
    p.add_argument("--teacher", help="teacher checkpoint path")
    p = sub.add_parser("report", help="routing, cost, and quality summary")
    p.add_argument("--teacher", help="teacher checkpoint path")
    return parser


_COMMANDS = {
    "teach": cmd_teach,
    "calibrate": cmd_calibrate,
    "prune": cmd_prune,
    "train": cmd_train,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 3
    except (OSError, FileExistsError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
