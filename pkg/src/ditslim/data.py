"""Deterministic synthetic data: latent clips with controllable motion,
condition embeddings, and calibration sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import seeded_rng

# projection used to derive image embeddings from clip content; fixed so that
# embeddings are a stable function of the clip alone
_IMG_PROJ_SEED = 987654321


@dataclass
class LatentClip:
    x0: np.ndarray  # (temporal_slices, height, width, channels)
    motion_level: float
    seed: int


@dataclass
class Condition:
    mode: str  # "t2v" | "i2v"
    text: np.ndarray  # (cond_text_len, cond_dim), unit-norm rows
    image: np.ndarray | None = None  # (cond_dim,), unit-norm, i2v only


@dataclass
class CalibrationSet:
    samples: list[tuple[LatentClip, Condition]]
    t_bins: list[int]
    seed: int


def gen_latent_clip(
    seed: int,
    motion_level: float,
    temporal_slices: int = 4,
    height: int = 4,
    width: int = 4,
    channels: int = 8,
) -> LatentClip:
    """Sum of 2..4 Gaussian blobs drifting across slices on a periodic grid.

    Per-slice displacement is proportional to motion_level and centered on the
    middle slice, so even the first slice moves with motion_level. Blob
    amplitudes are capped so values stay inside [-3, 3].
    """
    if not 0.0 <= motion_level <= 1.0:
        raise ContractError(f"motion_level must be in [0, 1], got {motion_level}")
    rng = seeded_rng(seed)
    n_blobs = int(rng.integers(2, 5))
    centers = rng.uniform(0.0, [height, width], size=(n_blobs, 2))
    sigmas = rng.uniform(0.9, 1.6, size=n_blobs)
    amps = rng.uniform(-0.55, 0.55, size=(n_blobs, channels))
    theta = rng.uniform(0.0, 2.0 * np.pi)
    direction = np.array([np.sin(theta), np.cos(theta)])
    max_drift = 1.5  # under half the grid period, keeps slice-to-slice change monotone

    # slice-specific detail, scaled by motion: fast clips carry content that
    # cannot be recovered by averaging neighboring slices
    detail_centers = rng.uniform(0.0, [height, width], size=(temporal_slices, 2, 2))
    detail_sigmas = rng.uniform(0.6, 1.0, size=(temporal_slices, 2))
    detail_amps = rng.uniform(-0.4, 0.4, size=(temporal_slices, 2, channels))

    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]

    def bump_at(cy, cx, sigma):
        # periodic (wrapped) distance keeps mass on the grid for any drift
        dy = np.minimum(np.abs(ys - cy) % height, height - np.abs(ys - cy) % height)
        dx = np.minimum(np.abs(xs - cx) % width, width - np.abs(xs - cx) % width)
        return np.exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma))

    x0 = np.zeros((temporal_slices, height, width, channels))
    mid = (temporal_slices - 1) / 2.0
    for f in range(temporal_slices):
        shift = (f - mid) * motion_level * max_drift * direction
        for b in range(n_blobs):
            cy, cx = centers[b] + shift
            x0[f] += bump_at(cy, cx, sigmas[b])[:, :, None] * amps[b]
        for b in range(2):
            cy, cx = detail_centers[f, b]
            x0[f] += motion_level * bump_at(cy, cx, detail_sigmas[f, b])[:, :, None] * detail_amps[f, b]
    return LatentClip(x0=x0, motion_level=float(motion_level), seed=int(seed))


def image_embedding_from_clip(clip: LatentClip, cond_dim: int) -> np.ndarray:
    """Unit-norm embedding of the clip's first slice via a fixed projection."""
    first = clip.x0[0].reshape(-1)
    proj_rng = seeded_rng(_IMG_PROJ_SEED)
    proj = proj_rng.normal(size=(cond_dim, first.size))
    emb = proj @ first
    norm = np.linalg.norm(emb)
    if norm == 0.0:
        emb = np.zeros(cond_dim)
        emb[0] = 1.0
        return emb
    return emb / norm


def gen_condition(
    seed: int,
    mode: str,
    cond_text_len: int = 4,
    cond_dim: int = 64,
    clip: LatentClip | None = None,
) -> Condition:
    if mode not in ("t2v", "i2v"):
        raise ContractError(f"mode must be t2v or i2v, got {mode!r}")
    rng = seeded_rng(seed)
    text = rng.normal(size=(cond_text_len, cond_dim))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    image = None
    if mode == "i2v":
        if clip is None:
            raise ContractError("i2v condition needs the paired clip")
        image = image_embedding_from_clip(clip, cond_dim)
    return Condition(mode=mode, text=text, image=image)


def calibration_t_bins(n_bins: int, t_max: int) -> list[int]:
    """Centers of n_bins equal partitions of [0, t_max], rounded to the grid."""
    if not 1 <= n_bins <= t_max:
        raise ContractError(f"n_bins must be in [1, {t_max}], got {n_bins}")
    centers = [(i + 0.5) * t_max / n_bins for i in range(n_bins)]
    bins = [max(1, min(t_max, int(round(c)))) for c in centers]
    if len(set(bins)) != len(bins):
        raise ContractError("t_max too small for the requested bin count")
    return bins


def build_calibration_set(
    n_samples: int,
    n_bins: int,
    seed: int,
    mode: str = "t2v",
    t_max: int = 1000,
    temporal_slices: int = 4,
    height: int = 4,
    width: int = 4,
    channels: int = 8,
    cond_text_len: int = 4,
    cond_dim: int = 64,
) -> CalibrationSet:
    """Motion levels stratified on a uniform [0, 1] grid; bin centers as t_bins."""
    if n_samples < 1:
        raise ContractError(f"n_samples must be >= 1, got {n_samples}")
    motions = np.linspace(0.0, 1.0, n_samples) if n_samples > 1 else np.array([0.0])
    samples = []
    for i in range(n_samples):
        clip_seed = seed * 1_000_003 + 2 * i
        clip = gen_latent_clip(clip_seed, float(motions[i]), temporal_slices, height, width, channels)
        cond = gen_condition(clip_seed + 1, mode, cond_text_len, cond_dim, clip=clip)
        samples.append((clip, cond))
    return CalibrationSet(samples=samples, t_bins=calibration_t_bins(n_bins, t_max), seed=int(seed))


def mean_interslice_diff(clip: LatentClip) -> float:
    """Mean L2 distance between consecutive slices."""
    diffs = clip.x0[1:] - clip.x0[:-1]
    return float(np.mean([np.linalg.norm(d) for d in diffs]))


def save_calibration_set(path, calib: CalibrationSet) -> None:
    """On-disk cache in the tensor-archive format; bit-exact round-trip."""
    from .archive import save_archive

    entries: dict[str, np.ndarray] = {}
    meta = {"seed": calib.seed, "t_bins": calib.t_bins, "samples": []}
    for i, (clip, cond) in enumerate(calib.samples):
        entries[f"sample.{i}.x0"] = clip.x0
        entries[f"sample.{i}.text"] = cond.text
        if cond.image is not None:
            entries[f"sample.{i}.image"] = cond.image
        meta["samples"].append({"motion_level": clip.motion_level, "seed": clip.seed, "mode": cond.mode})
    save_archive(path, entries, meta=meta)


def load_calibration_set(path) -> CalibrationSet:
    from .archive import load_archive

    entries, meta = load_archive(path)
    samples = []
    for i, info in enumerate(meta["samples"]):
        clip = LatentClip(x0=entries[f"sample.{i}.x0"], motion_level=info["motion_level"], seed=info["seed"])
        cond = Condition(mode=info["mode"], text=entries[f"sample.{i}.text"], image=entries.get(f"sample.{i}.image"))
        samples.append((clip, cond))
    return CalibrationSet(samples=samples, t_bins=[int(t) for t in meta["t_bins"]], seed=int(meta["seed"]))
