"""Toy flow-matching video diffusion transformer.

Teacher and student share this code; a student block simply carries narrower
projection matrices. Forward taps expose per-head attention matrices, per-head
attention-weighted values, and per-block hidden states for calibration and
feature matching.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as tz
from .archive import load_archive, save_archive
from .data import Condition
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, seeded_rng

# timestep-conditioning widths; fixed rather than configurable so the config
# surface stays the architectural one
T_SIN_DIM = 16
T_FEATURE_DIM = 8
RMS_EPS = 1e-6
ROPE_BASE = 10000.0


@dataclass
class DiTConfig:
    n_blocks: int = 8
    model_dim: int = 64
    sa_heads: int = 8
    ca_heads: int = 8
    head_dim: int = 8
    ffn_dim: int = 256
    temporal_slices: int = 4
    spatial_h: int = 4
    spatial_w: int = 4
    channels: int = 8
    cond_text_len: int = 4
    cond_dim: int = 64
    t_max: int = 1000

    def __post_init__(self):
        if self.sa_heads * self.head_dim != self.model_dim:
            raise ConfigError(
                f"sa_heads*head_dim must equal model_dim: {self.sa_heads}*{self.head_dim} != {self.model_dim}"
            )
        if self.ca_heads * self.head_dim != self.model_dim:
            raise ConfigError(
                f"ca_heads*head_dim must equal model_dim: {self.ca_heads}*{self.head_dim} != {self.model_dim}"
            )
        if self.head_dim % 8 != 0:
            raise ConfigError(f"head_dim must be a multiple of 8 for the 2:1:1 rotary split, got {self.head_dim}")

    @property
    def spatial_tokens(self) -> int:
        return self.spatial_h * self.spatial_w

    @property
    def tokens(self) -> int:
        return self.temporal_slices * self.spatial_tokens

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AttnParams:
    wq: Tensor  # (model_dim, heads*head_dim)
    wk: Tensor  # (key_dim, heads*head_dim)
    wv: Tensor  # (key_dim, heads*head_dim)
    wo: Tensor  # (heads*head_dim, model_dim)

    @property
    def n_heads_dim(self) -> int:
        return self.wq.shape[1]


@dataclass
class BlockParams:
    sa: AttnParams
    ca_streams: dict[str, AttnParams]  # "text" always; "image" in i2v
    w_up: Tensor  # (model_dim, ffn)
    w_down: Tensor  # (ffn, model_dim)
    norm_sa: Tensor
    norm_ca: Tensor
    norm_ffn: Tensor
    mod_w: Tensor  # (T_FEATURE_DIM, 6*model_dim)
    mod_b: Tensor  # (6*model_dim,)


@dataclass
class DiTParams:
    config: DiTConfig
    mode: str
    g1_w: Tensor  # (channels, model_dim)
    g1_b: Tensor
    g2_w: Tensor  # (model_dim, channels)
    g2_b: Tensor
    t_w1: Tensor  # (T_SIN_DIM, T_FEATURE_DIM)
    t_b1: Tensor
    t_w2: Tensor  # (T_FEATURE_DIM, T_FEATURE_DIM)
    t_b2: Tensor
    blocks: list[BlockParams] = field(default_factory=list)

    def named(self):
        """Flat (name, tensor) iteration in a stable order."""
        yield "g1_w", self.g1_w
        yield "g1_b", self.g1_b
        yield "g2_w", self.g2_w
        yield "g2_b", self.g2_b
        yield "t_w1", self.t_w1
        yield "t_b1", self.t_b1
        yield "t_w2", self.t_w2
        yield "t_b2", self.t_b2
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}"
            yield f"{p}.sa.wq", blk.sa.wq
            yield f"{p}.sa.wk", blk.sa.wk
            yield f"{p}.sa.wv", blk.sa.wv
            yield f"{p}.sa.wo", blk.sa.wo
            for stream in sorted(blk.ca_streams):
                s = blk.ca_streams[stream]
                yield f"{p}.ca.{stream}.wq", s.wq
                yield f"{p}.ca.{stream}.wk", s.wk
                yield f"{p}.ca.{stream}.wv", s.wv
                yield f"{p}.ca.{stream}.wo", s.wo
            yield f"{p}.w_up", blk.w_up
            yield f"{p}.w_down", blk.w_down
            yield f"{p}.norm_sa", blk.norm_sa
            yield f"{p}.norm_ca", blk.norm_ca
            yield f"{p}.norm_ffn", blk.norm_ffn
            yield f"{p}.mod_w", blk.mod_w
            yield f"{p}.mod_b", blk.mod_b

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named())

    def clone(self) -> "DiTParams":
        rebuilt = params_from_entries(self.config, self.mode, {n: t.data.copy() for n, t in self.named()})
        return rebuilt


@dataclass
class ForwardTaps:
    """Per-block instrumentation captured during a forward pass."""

    sa_attn: list[Tensor]  # (heads, tokens, tokens), post-softmax
    sa_weighted_v: list[Tensor]  # (heads, tokens, head_dim)
    ca_attn: list[dict[str, Tensor]]  # per stream, (heads, tokens, keys)
    ca_weighted_v: list[dict[str, Tensor]]
    hidden_pre: list[Tensor]  # residual stream entering each block
    hidden_post: list[Tensor]  # residual stream leaving each block


def init_params(config: DiTConfig, mode: str, seed: int) -> DiTParams:
    """Teacher initialization. Modulation projections and cross-attention
    output projections start at zero, making every block an exact identity
    on the residual stream."""
    if mode not in ("t2v", "i2v"):
        raise ConfigError(f"mode must be t2v or i2v, got {mode!r}")
    rng = seeded_rng(seed)
    d = config.model_dim

    def lin(n_in: int, n_out: int) -> Tensor:
        return Tensor(rng.normal(scale=n_in ** -0.5, size=(n_in, n_out)))

    def attn(key_dim: int, heads: int, zero_out: bool) -> AttnParams:
        hd = heads * config.head_dim
        wo = Tensor(np.zeros((hd, d))) if zero_out else Tensor(rng.normal(scale=hd ** -0.5, size=(hd, d)))
        # query/key scale above the usual 1/sqrt(fan_in): moderately sharp
        # attention logits at init break head symmetry, which the toy scale
        # needs for heads to specialize within the short training budget
        qk_scale = 3.0
        wq = Tensor(rng.normal(scale=qk_scale * d ** -0.5, size=(d, hd)))
        wk = Tensor(rng.normal(scale=qk_scale * key_dim ** -0.5, size=(key_dim, hd)))
        return AttnParams(wq=wq, wk=wk, wv=lin(key_dim, hd), wo=wo)

    blocks = []
    for _ in range(config.n_blocks):
        streams = {"text": attn(config.cond_dim, config.ca_heads, zero_out=True)}
        if mode == "i2v":
            streams["image"] = attn(config.cond_dim, config.ca_heads, zero_out=True)
        blocks.append(
            BlockParams(
                sa=attn(d, config.sa_heads, zero_out=False),
                ca_streams=streams,
                w_up=lin(d, config.ffn_dim),
                w_down=lin(config.ffn_dim, d),
                norm_sa=Tensor(np.ones(d)),
                norm_ca=Tensor(np.ones(d)),
                norm_ffn=Tensor(np.ones(d)),
                mod_w=Tensor(np.zeros((T_FEATURE_DIM, 6 * d))),
                mod_b=Tensor(np.zeros(6 * d)),
            )
        )
    return DiTParams(
        config=config,
        mode=mode,
        g1_w=lin(config.channels, d),
        g1_b=Tensor(np.zeros(d)),
        g2_w=lin(d, config.channels),
        g2_b=Tensor(np.zeros(config.channels)),
        t_w1=lin(T_SIN_DIM, T_FEATURE_DIM),
        t_b1=Tensor(np.zeros(T_FEATURE_DIM)),
        t_w2=lin(T_FEATURE_DIM, T_FEATURE_DIM),
        t_b2=Tensor(np.zeros(T_FEATURE_DIM)),
        blocks=blocks,
    )


def params_from_entries(config: DiTConfig, mode: str, entries: dict[str, np.ndarray]) -> DiTParams:
    """Rebuild a parameter tree from flat named arrays (archive loading)."""
    tens = {k: Tensor(v) for k, v in entries.items()}
    n_blocks = 0
    while f"blocks.{n_blocks}.sa.wq" in tens:
        n_blocks += 1
    if n_blocks != config.n_blocks:
        raise ContractError(f"checkpoint has {n_blocks} blocks, config expects {config.n_blocks}")
    blocks = []
    for i in range(n_blocks):
        p = f"blocks.{i}"
        streams = {}
        for stream in ("image", "text"):
            if f"{p}.ca.{stream}.wq" in tens:
                streams[stream] = AttnParams(
                    wq=tens[f"{p}.ca.{stream}.wq"],
                    wk=tens[f"{p}.ca.{stream}.wk"],
                    wv=tens[f"{p}.ca.{stream}.wv"],
                    wo=tens[f"{p}.ca.{stream}.wo"],
                )
        blocks.append(
            BlockParams(
                sa=AttnParams(tens[f"{p}.sa.wq"], tens[f"{p}.sa.wk"], tens[f"{p}.sa.wv"], tens[f"{p}.sa.wo"]),
                ca_streams=streams,
                w_up=tens[f"{p}.w_up"],
                w_down=tens[f"{p}.w_down"],
                norm_sa=tens[f"{p}.norm_sa"],
                norm_ca=tens[f"{p}.norm_ca"],
                norm_ffn=tens[f"{p}.norm_ffn"],
                mod_w=tens[f"{p}.mod_w"],
                mod_b=tens[f"{p}.mod_b"],
            )
        )
    return DiTParams(
        config=config,
        mode=mode,
        g1_w=tens["g1_w"],
        g1_b=tens["g1_b"],
        g2_w=tens["g2_w"],
        g2_b=tens["g2_b"],
        t_w1=tens["t_w1"],
        t_b1=tens["t_b1"],
        t_w2=tens["t_w2"],
        t_b2=tens["t_b2"],
        blocks=blocks,
    )


def save_params(path: str | Path, params: DiTParams, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["config"] = asdict(params.config)
    meta["mode"] = params.mode
    save_archive(path, {n: t.data for n, t in params.named()}, meta=meta)


def load_params(path: str | Path) -> tuple[DiTParams, dict]:
    entries, meta = load_archive(path)
    config = DiTConfig.from_dict(meta["config"])
    params = params_from_entries(config, meta["mode"], entries)
    return params, meta


# ---------------------------------------------------------------------------
# forward process (noising)
# ---------------------------------------------------------------------------


def forward_process(x0, eps, t: int, t_max: int):
    """x_t = (1 - s) x0 + s eps with s = t/t_max, the straight-line schedule."""
    if not 0 <= t <= t_max:
        raise ContractError(f"timestep {t} outside [0, {t_max}]")
    s = t / t_max
    return (1.0 - s) * np.asarray(x0, dtype=np.float64) + s * np.asarray(eps, dtype=np.float64)


# ---------------------------------------------------------------------------
# rotary position encoding over (slice, row, col) coordinates
# ---------------------------------------------------------------------------


def _axis_freqs(n_pairs: int) -> np.ndarray:
    if n_pairs == 1:
        return np.ones(1)
    return ROPE_BASE ** (-np.arange(n_pairs) / n_pairs)


_ROPE_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def rope_tables(config: DiTConfig) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (tokens, head_dim//2).

    Pair slots split 2:1:1 over the (temporal, height, width) coordinate axes;
    each head uses the same tables.
    """
    key = (config.temporal_slices, config.spatial_h, config.spatial_w, config.head_dim)
    cached = _ROPE_CACHE.get(key)
    if cached is not None:
        return cached
    pairs = config.head_dim // 2
    n_h = pairs // 4
    n_w = pairs // 4
    n_t = pairs - n_h - n_w
    angles = np.zeros((config.tokens, pairs))
    ft = _axis_freqs(n_t)
    fh = _axis_freqs(n_h)
    fw = _axis_freqs(n_w)
    idx = 0
    for f in range(config.temporal_slices):
        for r in range(config.spatial_h):
            for c in range(config.spatial_w):
                angles[idx, :n_t] = f * ft
                angles[idx, n_t:n_t + n_h] = r * fh
                angles[idx, n_t + n_h:] = c * fw
                idx += 1
    tables = (np.cos(angles), np.sin(angles))
    _ROPE_CACHE[key] = tables
    return tables


def sinusoidal_t(t: float, dim: int) -> np.ndarray:
    """Interleaved sin/cos timestep features at geometric frequencies."""
    if dim % 2 != 0:
        raise ConfigError(f"sinusoidal dim must be even, got {dim}")
    half = dim // 2
    freqs = ROPE_BASE ** (-np.arange(half) / max(half - 1, 1))
    out = np.zeros(dim)
    out[0::2] = np.sin(t * freqs)
    out[1::2] = np.cos(t * freqs)
    return out


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _heads_view(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
    # (tokens, heads*head_dim) -> (heads, tokens, head_dim)
    t = x.shape[0]
    return tz.transpose(tz.reshape(x, (t, n_heads, head_dim)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    # (heads, tokens, head_dim) -> (tokens, heads*head_dim)
    h, t, hd = x.shape
    return tz.reshape(tz.transpose(x, (1, 0, 2)), (t, h * hd))


def _attention(
    q: Tensor,
    keys: Tensor,
    values: Tensor,
    n_heads: int,
    head_dim: int,
    rope: tuple[np.ndarray, np.ndarray] | None,
):
    """Returns (merged output, post-softmax attention, per-head weighted values)."""
    q3 = _heads_view(q, n_heads, head_dim)
    k3 = _heads_view(keys, n_heads, head_dim)
    v3 = _heads_view(values, n_heads, head_dim)
    if rope is not None:
        cos, sin = rope
        q3 = tz.rotate_pairs(q3, cos, sin)
        k3 = tz.rotate_pairs(k3, cos, sin)
    scores = tz.mul(tz.matmul(q3, tz.transpose(k3, (0, 2, 1))), head_dim ** -0.5)
    attn = tz.softmax_lastdim(scores)
    weighted = tz.matmul(attn, v3)  # (heads, q_tokens, head_dim)
    return _merge_heads(weighted), attn, weighted


def _modulation(blk: BlockParams, t_feat: Tensor, d: int) -> list[Tensor]:
    vecs = tz.add(tz.matmul(t_feat, blk.mod_w), blk.mod_b)  # (1, 6d)
    rows = tz.reshape(vecs, (6, d))
    return [tz.reshape(tz.slice_axis0(rows, i, i + 1), (d,)) for i in range(6)]


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return tz.add(tz.mul(x, tz.add(scale, 1.0)), shift)


def run_block(
    blk: BlockParams,
    config: DiTConfig,
    h: Tensor,
    t_feat: Tensor,
    cond_tensors: dict[str, Tensor],
    rope: tuple[np.ndarray, np.ndarray],
    taps: ForwardTaps | None,
) -> Tensor:
    d = config.model_dim
    shift_sa, scale_sa, gate_sa, shift_ffn, scale_ffn, gate_ffn = _modulation(blk, t_feat, d)

    # self-attention over the full spatiotemporal sequence, gated residual
    xn = _modulate(tz.rmsnorm(h, blk.norm_sa, RMS_EPS), shift_sa, scale_sa)
    n_sa = blk.sa.n_heads_dim // config.head_dim
    sa_out, sa_attn, sa_wv = _attention(
        tz.matmul(xn, blk.sa.wq),
        tz.matmul(xn, blk.sa.wk),
        tz.matmul(xn, blk.sa.wv),
        n_sa,
        config.head_dim,
        rope,
    )
    h = tz.add(h, tz.mul(tz.matmul(sa_out, blk.sa.wo), gate_sa))

    # cross-attention to the condition streams, ungated residual
    xc = tz.rmsnorm(h, blk.norm_ca, RMS_EPS)
    ca_attns: dict[str, Tensor] = {}
    ca_wvs: dict[str, Tensor] = {}
    ca_sum = None
    for stream in sorted(blk.ca_streams):
        sp = blk.ca_streams[stream]
        kv = cond_tensors[stream]
        n_ca = sp.n_heads_dim // config.head_dim
        out, attn, wv = _attention(
            tz.matmul(xc, sp.wq),
            tz.matmul(kv, sp.wk),
            tz.matmul(kv, sp.wv),
            n_ca,
            config.head_dim,
            rope=None,
        )
        proj = tz.matmul(out, sp.wo)
        ca_sum = proj if ca_sum is None else tz.add(ca_sum, proj)
        ca_attns[stream] = attn
        ca_wvs[stream] = wv
    h = tz.add(h, ca_sum)

    # feed-forward, gated residual
    xf = _modulate(tz.rmsnorm(h, blk.norm_ffn, RMS_EPS), shift_ffn, scale_ffn)
    ff = tz.matmul(tz.silu(tz.matmul(xf, blk.w_up)), blk.w_down)
    h = tz.add(h, tz.mul(ff, gate_ffn))

    if taps is not None:
        taps.sa_attn.append(sa_attn)
        taps.sa_weighted_v.append(sa_wv)
        taps.ca_attn.append(ca_attns)
        taps.ca_weighted_v.append(ca_wvs)
    return h


def embed_input(params: DiTParams, x_t: np.ndarray, t: int) -> tuple[Tensor, Tensor]:
    """Token embedding and the shared timestep feature vector."""
    config = params.config
    expected = (config.temporal_slices, config.spatial_h, config.spatial_w, config.channels)
    if x_t.shape != expected:
        raise ShapeError(f"latent shape {x_t.shape} does not match config {expected}")
    tokens = Tensor(x_t.reshape(config.tokens, config.channels))
    h = tz.add(tz.matmul(tokens, params.g1_w), params.g1_b)
    sin = Tensor(sinusoidal_t(float(t), T_SIN_DIM).reshape(1, T_SIN_DIM))
    t_feat = tz.add(tz.matmul(sin, params.t_w1), params.t_b1)
    t_feat = tz.add(tz.matmul(tz.silu(t_feat), params.t_w2), params.t_b2)
    return h, t_feat


def project_output(params: DiTParams, h: Tensor) -> Tensor:
    config = params.config
    out = tz.add(tz.matmul(h, params.g2_w), params.g2_b)
    return tz.reshape(out, (config.temporal_slices, config.spatial_h, config.spatial_w, config.channels))


def cond_tensors_for(params: DiTParams, cond: Condition) -> dict[str, Tensor]:
    streams = {"text": Tensor(cond.text)}
    if "image" in params.blocks[0].ca_streams:
        if cond.image is None:
            raise ContractError("i2v model needs a condition with an image embedding")
        streams["image"] = Tensor(cond.image.reshape(1, -1))
    return streams


def dit_forward(
    params: DiTParams,
    x_t: np.ndarray,
    t: int,
    cond: Condition,
    taps_requested: bool = False,
    exec_counter: list[int] | None = None,
) -> tuple[Tensor, ForwardTaps | None]:
    """Full forward: velocity of the latent's shape, plus taps when asked."""
    config = params.config
    h, t_feat = embed_input(params, x_t, t)
    conds = cond_tensors_for(params, cond)
    rope = rope_tables(config)
    taps = ForwardTaps([], [], [], [], [], []) if taps_requested else None
    for i, blk in enumerate(params.blocks):
        if taps is not None:
            taps.hidden_pre.append(h)
        h = run_block(blk, config, h, t_feat, conds, rope, taps)
        if exec_counter is not None:
            exec_counter[i] += 1
        if taps is not None:
            taps.hidden_post.append(h)
    return project_output(params, h), taps


def flow_matching_loss(params: DiTParams, batch: list[dict]) -> Tensor:
    """Mean over the batch of the mean-square velocity error against eps - x0."""
    if not batch:
        raise ContractError("flow_matching_loss needs a nonempty batch")
    total = None
    for sample in batch:
        x_t = forward_process(sample["x0"], sample["eps"], sample["t"], params.config.t_max)
        v, _ = dit_forward(params, x_t, sample["t"], sample["cond"])
        target = Tensor(np.asarray(sample["eps"]) - np.asarray(sample["x0"]))
        diff = tz.sub(v, target)
        term = tz.mean_all(tz.mul(diff, diff))
        total = term if total is None else tz.add(total, term)
    return tz.mul(total, 1.0 / len(batch))


def block_residual_norms(
    params: DiTParams,
    batch: list[dict],
    t_grid: list[int],
    normalize: bool = False,
) -> np.ndarray:
    """Mean per-block residual magnitude over the batch at each timestep.

    With ``normalize``, each block's row is min-max scaled to [0, 1]
    independently (rows that are constant stay at zero).
    """
    config = params.config
    out = np.zeros((config.n_blocks, len(t_grid)))
    with tz.stop_recording():
        for j, t in enumerate(t_grid):
            for sample in batch:
                x_t = forward_process(sample["x0"], sample["eps"], t, config.t_max)
                _, taps = dit_forward(params, x_t, t, sample["cond"], taps_requested=True)
                for i in range(config.n_blocks):
                    delta = taps.hidden_post[i].data - taps.hidden_pre[i].data
                    out[i, j] += np.linalg.norm(delta)
            out[:, j] /= len(batch)
    if normalize:
        lo = out.min(axis=1, keepdims=True)
        hi = out.max(axis=1, keepdims=True)
        span = np.where(hi > lo, hi - lo, 1.0)
        out = (out - lo) / span
    return out
