"""Latent-token connector: alternating text-resampler and gated extra-modality blocks.

A small set of learnable latent tokens cross-attends to a text-proxy stream in
every resampler block, and to extra-modality streams in the gated blocks that
follow. Gated updates are scaled per token, so a branch trained on one modality
can later be blended with others without touching the shared text path.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import RngState, Tensor

TEXT_MODALITY = "text_proxy"
EXTRA_MODALITY = "extra_modality"

GATE_SEPARABLE = "separable"
GATE_SHARED = "shared"

FFN_MULT = 4  # hidden width of block feed-forward layers, in units of d_model


class ConnectorError(ValueError):
    """Configuration or modality mismatch in the connector stack."""


@dataclass(frozen=True)
class ConnectorConfig:
    n_tokens: int = 12
    d_model: int = 32
    n_heads: int = 4
    d_time: int = 16
    depth: int = 2
    gate_scale: float = 1.0
    d_cond: dict = field(default_factory=lambda: {TEXT_MODALITY: 12, EXTRA_MODALITY: 8})
    gate_mode: str = GATE_SEPARABLE

    def validate(self) -> None:
        if self.depth < 1:
            raise ConnectorError("depth must be at least 1")
        if self.d_model % self.n_heads != 0:
            raise ConnectorError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_time % 2 != 0:
            raise ConnectorError("d_time must be even")
        if self.gate_scale <= 0:
            raise ConnectorError("gate_scale must be positive")
        if self.gate_mode not in (GATE_SEPARABLE, GATE_SHARED):
            raise ConnectorError(f"unknown gate_mode {self.gate_mode!r}")
        for modality in (TEXT_MODALITY, EXTRA_MODALITY):
            if modality not in self.d_cond:
                raise ConnectorError(f"d_cond missing entry for {modality!r}")


@dataclass
class ConditionStream:
    """A sequence of feature vectors used as cross-attention keys/values."""

    modality: str
    tokens: Tensor  # (n, d_cond)

    def __post_init__(self):
        if not isinstance(self.tokens, Tensor):
            self.tokens = Tensor(np.asarray(self.tokens, dtype=np.float64))
        if self.tokens.data.ndim != 2 or self.tokens.data.shape[0] < 1:
            raise ConnectorError("condition stream needs a (n>=1, d_cond) token matrix")


@dataclass(frozen=True)
class TimeEmbedding:
    """Sinusoidal features of an integer timestep; a pure function of (t, d_time)."""

    t: int
    vector: Tensor  # (1, d_time)


def time_embed(t: int, d_time: int) -> TimeEmbedding:
    """Interleaved sin/cos of t at geometric frequencies (base 10000)."""
    if d_time % 2 != 0:
        raise ConnectorError("time_embed requires an even d_time")
    if t < 0:
        raise ConnectorError("time_embed requires t >= 0")
    half = d_time // 2
    freqs = np.power(10000.0, -np.arange(half) / half)
    angles = t * freqs
    vec = np.empty((1, d_time), dtype=np.float64)
    vec[0, 0::2] = np.sin(angles)
    vec[0, 1::2] = np.cos(angles)
    return TimeEmbedding(t=t, vector=Tensor(vec))


@dataclass
class AdaLNParams:
    """Timestep-conditioned affine on top of layer norm; outputs start at zero."""

    w_hidden: Tensor  # (d_time, d_time)
    b_hidden: Tensor
    w_scale: Tensor  # (d_time, d_model), zero-init
    b_scale: Tensor
    w_shift: Tensor  # (d_time, d_model), zero-init
    b_shift: Tensor


@dataclass
class AttnParams:
    modality: str
    adaln: AdaLNParams
    w_in: Tensor  # (d_cond, d_model) per-modality input projection
    b_in: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor  # no key bias: softmax is invariant to per-row score shifts
    wv: Tensor
    bv: Tensor
    wo: Tensor  # zero-init so a fresh block is a no-op under the residual
    bo: Tensor


@dataclass
class FFNParams:
    adaln: AdaLNParams
    w1: Tensor
    b1: Tensor
    w2: Tensor  # zero-init
    b2: Tensor


@dataclass
class GateParams:
    """Per-layer gate state: fixed scale, learnable globals, per-token projections.

    `gate_scale` is a hyperparameter and never trained. Global gates start at
    exactly 0 so an untrained gated block leaves the latents untouched. The
    separable projections start away from zero (bias 1) so the global gates
    still receive gradient at initialization; in shared mode they are absent
    and every token shares the scalar gate.
    """

    gate_scale: float
    global_attn_gate: Tensor  # scalar, init 0
    global_ffn_gate: Tensor  # scalar, init 0
    sep_attn_w: Tensor | None  # (d_model, 1)
    sep_attn_b: Tensor | None
    sep_ffn_w: Tensor | None
    sep_ffn_b: Tensor | None


@dataclass
class ResamplerBlockParams:
    attn: AttnParams
    ffn: FFNParams


@dataclass
class GatedBlockParams:
    attn: AttnParams
    ffn: FFNParams
    gates: GateParams


@dataclass
class ConnectorParams:
    """The shared text path: learnable latents plus one resampler block per level."""

    latents: Tensor  # (n_tokens, d_model)
    blocks: list  # depth ResamplerBlockParams


@dataclass
class BranchParams:
    """One trainable conditioning branch: a gated block per level plus its null stream."""

    blocks: list  # depth GatedBlockParams
    null_tokens: Tensor  # (n_stream_tokens, d_cond) learned null-condition embedding


@dataclass
class GateRecord:
    """Per-token gate values captured from one gated block during a forward pass."""

    layer_index: int
    token_gates_attn: np.ndarray  # (n_tokens,)
    token_gates_ffn: np.ndarray


@dataclass
class BranchInput:
    """Runtime view of one gated branch inside a forward pass."""

    blocks: list  # depth GatedBlockParams
    stream: ConditionStream
    blend: float = 1.0
    te: TimeEmbedding | None = None  # per-branch override; None = shared timestep
    branch_id: str = ""
    fingerprint: str = ""  # content hash used to break branch_id ties deterministically


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _linear_init(rng: RngState, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(rng.normal((fan_in, fan_out)) / np.sqrt(fan_in))


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape))


def init_adaln(cfg: ConnectorConfig, rng: RngState) -> AdaLNParams:
    return AdaLNParams(
        w_hidden=_linear_init(rng, cfg.d_time, cfg.d_time),
        b_hidden=_zeros(cfg.d_time),
        w_scale=_zeros(cfg.d_time, cfg.d_model),
        b_scale=_zeros(cfg.d_model),
        w_shift=_zeros(cfg.d_time, cfg.d_model),
        b_shift=_zeros(cfg.d_model),
    )


def init_attn(cfg: ConnectorConfig, modality: str, rng: RngState) -> AttnParams:
    if modality not in cfg.d_cond:
        raise ConnectorError(f"no conditioning width registered for modality {modality!r}")
    d_cond = cfg.d_cond[modality]
    d = cfg.d_model
    return AttnParams(
        modality=modality,
        adaln=init_adaln(cfg, rng),
        w_in=_linear_init(rng, d_cond, d),
        b_in=_zeros(d),
        wq=_linear_init(rng, d, d),
        bq=_zeros(d),
        wk=_linear_init(rng, d, d),
        wv=_linear_init(rng, d, d),
        bv=_zeros(d),
        wo=_zeros(d, d),
        bo=_zeros(d),
    )


def init_ffn(cfg: ConnectorConfig, rng: RngState) -> FFNParams:
    d, hidden = cfg.d_model, FFN_MULT * cfg.d_model
    return FFNParams(
        adaln=init_adaln(cfg, rng),
        w1=_linear_init(rng, d, hidden),
        b1=_zeros(hidden),
        w2=_zeros(hidden, d),
        b2=_zeros(d),
    )


def init_gates(cfg: ConnectorConfig, rng: RngState) -> GateParams:
    if cfg.gate_mode == GATE_SHARED:
        sep = dict(sep_attn_w=None, sep_attn_b=None, sep_ffn_w=None, sep_ffn_b=None)
    else:
        sep = dict(
            sep_attn_w=Tensor(0.02 * rng.normal((cfg.d_model, 1))),
            sep_attn_b=Tensor(np.ones(1)),
            sep_ffn_w=Tensor(0.02 * rng.normal((cfg.d_model, 1))),
            sep_ffn_b=Tensor(np.ones(1)),
        )
    return GateParams(
        gate_scale=cfg.gate_scale,
        global_attn_gate=_zeros(),
        global_ffn_gate=_zeros(),
        **sep,
    )


def init_resampler_block(cfg: ConnectorConfig, rng: RngState) -> ResamplerBlockParams:
    return ResamplerBlockParams(attn=init_attn(cfg, TEXT_MODALITY, rng), ffn=init_ffn(cfg, rng))


def init_gated_block(cfg: ConnectorConfig, rng: RngState) -> GatedBlockParams:
    """Gated blocks start as identities through their zero global gates alone.

    Their output projections are randomly initialized; zeroing those too would
    leave both the gates and the projections with exactly zero gradient (each
    is multiplied by the other), freezing the branch at its initialization.
    """
    attn = init_attn(cfg, EXTRA_MODALITY, rng)
    attn.wo = _linear_init(rng, cfg.d_model, cfg.d_model)
    ffn = init_ffn(cfg, rng)
    ffn.w2 = _linear_init(rng, FFN_MULT * cfg.d_model, cfg.d_model)
    return GatedBlockParams(attn=attn, ffn=ffn, gates=init_gates(cfg, rng))


def init_connector(cfg: ConnectorConfig, rng: RngState) -> ConnectorParams:
    cfg.validate()
    latents = Tensor(rng.normal((cfg.n_tokens, cfg.d_model)) / np.sqrt(cfg.d_model))
    return ConnectorParams(
        latents=latents,
        blocks=[init_resampler_block(cfg, rng) for _ in range(cfg.depth)],
    )


def init_branch(cfg: ConnectorConfig, rng: RngState, n_stream_tokens: int) -> BranchParams:
    return BranchParams(
        blocks=[init_gated_block(cfg, rng) for _ in range(cfg.depth)],
        null_tokens=Tensor(0.02 * rng.normal((n_stream_tokens, cfg.d_cond[EXTRA_MODALITY]))),
    )


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def adaln(x: Tensor, te: TimeEmbedding, p: AdaLNParams) -> Tensor:
    """layer_norm(x) modulated by timestep-dependent scale and shift."""
    h = nm.silu(te.vector @ p.w_hidden + p.b_hidden)
    scale = h @ p.w_scale + p.b_scale
    shift = h @ p.w_shift + p.b_shift
    return nm.layer_norm(x) * (scale + 1.0) + shift


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    n, d = x.data.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.data.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def time_aware_attn(latents: Tensor, stream: ConditionStream, te: TimeEmbedding,
                    p: AttnParams, n_heads: int) -> Tensor:
    """Multi-head cross-attention from timestep-modulated latents into a stream.

    Returns only the block update; residual addition is the caller's job.
    """
    if stream.modality != p.modality:
        raise ConnectorError(
            f"no input projection registered for modality {stream.modality!r} "
            f"(block expects {p.modality!r})"
        )
    x = adaln(latents, te, p.adaln)
    q = x @ p.wq + p.bq
    kv = stream.tokens @ p.w_in + p.b_in
    k = kv @ p.wk
    v = kv @ p.wv + p.bv
    heads = nm.scaled_dot_attention(
        _split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads)
    )
    return _merge_heads(heads) @ p.wo + p.bo


def time_aware_ffn(latents: Tensor, te: TimeEmbedding, p: FFNParams) -> Tensor:
    """Timestep-modulated two-layer GELU MLP; residual added by the caller."""
    x = adaln(latents, te, p.adaln)
    return nm.gelu(x @ p.w1 + p.b1) @ p.w2 + p.b2


def pr_block(latents: Tensor, stream: ConditionStream, te: TimeEmbedding,
             p: ResamplerBlockParams, n_heads: int) -> Tensor:
    """Text-resampler block: residual cross-attention then residual feed-forward."""
    if stream.modality != TEXT_MODALITY:
        raise ConnectorError(f"resampler block expects a {TEXT_MODALITY!r} stream")
    latents = latents + time_aware_attn(latents, stream, te, p.attn, n_heads)
    return latents + time_aware_ffn(latents, te, p.ffn)


def _token_gate(gates: GateParams, latents: Tensor, which: str) -> Tensor:
    """Per-token gate column: fixed scale times separable projection times global gate.

    The multiplication order (scale first, then the global gate) is pinned so
    that rescaling the fixed scale by c while scaling the global gate by 1/c is
    bit-exact for power-of-two c.
    """
    if which == "attn":
        w, b, global_gate = gates.sep_attn_w, gates.sep_attn_b, gates.global_attn_gate
    else:
        w, b, global_gate = gates.sep_ffn_w, gates.sep_ffn_b, gates.global_ffn_gate
    if w is None:
        n_tokens = latents.data.shape[0]
        sep = Tensor(np.ones((n_tokens, 1)))
    else:
        sep = latents @ w + b
    return (gates.gate_scale * sep) * global_gate


def agpr_block(latents: Tensor, stream: ConditionStream, te: TimeEmbedding,
               p: GatedBlockParams, n_heads: int,
               layer_index: int = 0) -> tuple[Tensor, GateRecord]:
    """Gated extra-modality block; returns updated latents and the gate values.

    The feed-forward gate is recomputed from the post-attention latents, so the
    two residual updates see different gate values.
    """
    g_attn = _token_gate(p.gates, latents, "attn")
    latents = latents + g_attn * time_aware_attn(latents, stream, te, p.attn, n_heads)
    g_ffn = _token_gate(p.gates, latents, "ffn")
    latents = latents + g_ffn * time_aware_ffn(latents, te, p.ffn)
    record = GateRecord(
        layer_index=layer_index,
        token_gates_attn=g_attn.data[:, 0].copy(),
        token_gates_ffn=g_ffn.data[:, 0].copy(),
    )
    return latents, record


def _branch_order(branches) -> list:
    return sorted(
        range(len(branches)),
        key=lambda i: (branches[i].branch_id, branches[i].fingerprint, branches[i].blend),
    )


def gated_level(latents: Tensor, branches: list, level: int, te: TimeEmbedding,
                n_heads: int, record_gates: bool = False):
    """One composed gated level: blended attention updates, then blended FFN updates.

    Branch contributions are summed in canonical (branch_id, fingerprint) order
    so list order never changes the result. Each branch uses its own weights,
    stream, and (optionally overridden) timestep. FFN gates are recomputed from
    the post-attention latents, mirroring the single-branch block.
    """
    order = _branch_order(branches)
    records: dict[int, GateRecord] = {}

    attn_gates = {}
    updated = latents
    for i in order:
        b = branches[i]
        blk = b.blocks[level]
        b_te = b.te if b.te is not None else te
        g_attn = _token_gate(blk.gates, latents, "attn")
        attn_gates[i] = g_attn
        increment = b.blend * (g_attn * time_aware_attn(latents, b.stream, b_te, blk.attn, n_heads))
        updated = updated + increment
    post_attn = updated

    for i in order:
        b = branches[i]
        blk = b.blocks[level]
        b_te = b.te if b.te is not None else te
        g_ffn = _token_gate(blk.gates, post_attn, "ffn")
        increment = b.blend * (g_ffn * time_aware_ffn(post_attn, b_te, blk.ffn))
        updated = updated + increment
        if record_gates:
            records[i] = GateRecord(
                layer_index=level,
                token_gates_attn=attn_gates[i].data[:, 0].copy(),
                token_gates_ffn=g_ffn.data[:, 0].copy(),
            )
    per_branch = [records.get(i) for i in range(len(branches))] if record_gates else []
    return updated, per_branch


def connector_forward(cfg: ConnectorConfig, params: ConnectorParams,
                      text_stream: ConditionStream, branches: list,
                      te: TimeEmbedding, record_gates: bool = False):
    """Run the full alternating stack and return the conditioning tokens.

    Starts from the learnable latents, applies one resampler block and (when
    branches are present) one gated level per depth step. With no branches the
    gated levels are skipped entirely, which is the text-only path.

    Returns (tokens, records) where records[b][level] is the GateRecord of
    branch b at that level (empty unless record_gates and branches are given).
    """
    if len(params.blocks) != cfg.depth:
        raise ConnectorError(
            f"config depth {cfg.depth} but {len(params.blocks)} resampler blocks"
        )
    for b in branches:
        if len(b.blocks) != cfg.depth:
            raise ConnectorError(
                f"branch {b.branch_id!r} has {len(b.blocks)} levels, config depth {cfg.depth}"
            )
    latents = params.latents
    records: list[list[GateRecord]] = [[] for _ in branches]
    for level in range(cfg.depth):
        latents = pr_block(latents, text_stream, te, params.blocks[level], cfg.n_heads)
        if branches:
            latents, level_records = gated_level(
                latents, branches, level, te, cfg.n_heads, record_gates
            )
            if record_gates:
                for b_idx, rec in enumerate(level_records):
                    records[b_idx].append(rec)
    return latents, records
