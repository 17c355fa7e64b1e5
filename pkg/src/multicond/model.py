"""Unified model container: shared text path, denoiser, and gated branches.

The same object backs all three shapes the pipeline produces: a text-only model
(no branches), a single-branch trained model, and a multi-branch composed model.
Parameters carry canonical dotted names so partitions, checkpoints, and hashes
stay stable across runs.
"""

from dataclasses import dataclass, field

import numpy as np

from . import connector as cn
from . import dataset as ds
from . import diffusion as df
from .numerics import RngState, Tensor, content_hash

STAGE_TEXT = "pr"
STAGE_BRANCH = "agpr"
STAGE_COMPOSED = "composed"


class ModelError(ValueError):
    """Inconsistent model structure or unsupported conditioning request."""


@dataclass
class BranchSpec:
    """One composable conditioning branch and its composition settings."""

    branch_id: str
    factor: str  # dataset factor the branch was trained on
    params: cn.BranchParams
    blend: float = 1.0
    time_override: int | None = None
    condition: cn.ConditionStream | None = None  # default stream when none is given
    fingerprint: str = ""


@dataclass
class ConditionAssignment:
    """A generation target: optional text class plus per-branch factor classes.

    `None` entries fall back to the model's no-text embedding or the branch's
    learned null stream respectively.
    """

    text_label: int | None = None
    branch_labels: dict = field(default_factory=dict)  # branch_id -> class index or None


@dataclass
class GenerativeModel:
    connector_cfg: cn.ConnectorConfig
    diffusion_cfg: df.DiffusionConfig
    task: ds.TaskSpec
    connector: cn.ConnectorParams
    null_text: Tensor
    denoiser: df.DenoiserParams
    branches: list = field(default_factory=list)  # list[BranchSpec]
    stage: str = STAGE_TEXT
    meta: dict = field(default_factory=dict)
    _codebooks: ds.Codebooks | None = None

    @property
    def d_time(self) -> int:
        return self.connector_cfg.d_time

    @property
    def codebooks(self) -> ds.Codebooks:
        if self._codebooks is None:
            self._codebooks = ds.build_codebooks(self.task)
        return self._codebooks

    # -- conditioning ------------------------------------------------------

    def text_stream(self, label: int | None) -> cn.ConditionStream:
        """Text-proxy stream for a class label, or the model's no-text embedding."""
        if label is None:
            if self.task.text_mode == ds.TEXT_MODE_NEUTRAL:
                tokens = Tensor(self.codebooks.neutral_text)
            else:
                tokens = self.null_text
        else:
            if self.task.text_mode == ds.TEXT_MODE_NEUTRAL:
                raise ModelError("model was trained with a neutral text stream; "
                                 "it cannot condition on a text class")
            if not 0 <= label < self.task.n_text_classes:
                raise ModelError(f"text class {label} out of range")
            tokens = Tensor(self.codebooks.text[label])
        return cn.ConditionStream(modality=cn.TEXT_MODALITY, tokens=tokens)

    def branch_stream(self, spec: BranchSpec, label: int | None) -> cn.ConditionStream:
        if label is None:
            if spec.condition is not None:
                return spec.condition
            return cn.ConditionStream(modality=cn.EXTRA_MODALITY, tokens=spec.params.null_tokens)
        n_classes = self.task.n_classes(spec.factor)
        if not 0 <= label < n_classes:
            raise ModelError(f"class {label} out of range for factor {spec.factor!r}")
        tokens = Tensor(self.codebooks.modal(spec.factor)[label])
        return cn.ConditionStream(modality=cn.EXTRA_MODALITY, tokens=tokens)

    def _branch_inputs(self, per_branch_streams: list, t: int) -> list:
        inputs = []
        for spec, stream in zip(self.branches, per_branch_streams):
            te = None
            if spec.time_override is not None:
                te = cn.time_embed(spec.time_override, self.d_time)
            inputs.append(
                cn.BranchInput(
                    blocks=spec.params.blocks,
                    stream=stream,
                    blend=spec.blend,
                    te=te,
                    branch_id=spec.branch_id,
                    fingerprint=spec.fingerprint,
                )
            )
        return inputs

    def forward_tokens(self, text_stream: cn.ConditionStream, per_branch_streams: list,
                       t: int, record_gates: bool = False):
        te = cn.time_embed(t, self.d_time)
        return cn.connector_forward(
            self.connector_cfg, self.connector, text_stream,
            self._branch_inputs(per_branch_streams, t), te, record_gates,
        )

    def condition_tokens(self, assignment: ConditionAssignment, t: int) -> Tensor:
        """Connector tokens for one generation target at one timestep."""
        text = self.text_stream(assignment.text_label)
        streams = [
            self.branch_stream(spec, assignment.branch_labels.get(spec.branch_id))
            for spec in self.branches
        ]
        tokens, _ = self.forward_tokens(text, streams, t)
        return tokens

    def null_tokens(self, t: int) -> Tensor:
        """Fully-unconditional tokens: learned null text plus every branch nulled."""
        if self.null_text is None:
            raise ModelError("guided sampling needs the learned null-condition embedding")
        text = cn.ConditionStream(modality=cn.TEXT_MODALITY, tokens=self.null_text)
        streams = [
            cn.ConditionStream(modality=cn.EXTRA_MODALITY, tokens=spec.params.null_tokens)
            for spec in self.branches
        ]
        tokens, _ = self.forward_tokens(text, streams, t)
        return tokens

    # -- parameter bookkeeping --------------------------------------------

    def named_parameters(self) -> dict:
        params = {"latents": self.connector.latents, "null_text": self.null_text}
        for lvl, block in enumerate(self.connector.blocks):
            params.update(_named_attn(f"text.{lvl}.attn", block.attn))
            params.update(_named_ffn(f"text.{lvl}.ffn", block.ffn))
        params.update(_named_denoiser("denoiser", self.denoiser))
        for b_idx, spec in enumerate(self.branches):
            params.update(named_branch_parameters(f"branch.{b_idx}", spec.params))
        return params

    def shared_parameter_names(self) -> list:
        return [n for n in self.named_parameters() if not n.startswith("branch.")]

    def shared_hash(self) -> str:
        """Content hash of the shared (text path + latents + denoiser) partition."""
        params = self.named_parameters()
        return content_hash({n: params[n].data for n in self.shared_parameter_names()})

    def set_requires_grad(self, names, flag: bool) -> None:
        params = self.named_parameters()
        for n in names:
            params[n].requires_grad = flag


def _named_adaln(prefix: str, p: cn.AdaLNParams) -> dict:
    return {
        f"{prefix}.w_hidden": p.w_hidden,
        f"{prefix}.b_hidden": p.b_hidden,
        f"{prefix}.w_scale": p.w_scale,
        f"{prefix}.b_scale": p.b_scale,
        f"{prefix}.w_shift": p.w_shift,
        f"{prefix}.b_shift": p.b_shift,
    }


def _named_attn(prefix: str, p: cn.AttnParams) -> dict:
    out = _named_adaln(f"{prefix}.adaln", p.adaln)
    for name in ("w_in", "b_in", "wq", "bq", "wk", "wv", "bv", "wo", "bo"):
        out[f"{prefix}.{name}"] = getattr(p, name)
    return out


def _named_ffn(prefix: str, p: cn.FFNParams) -> dict:
    out = _named_adaln(f"{prefix}.adaln", p.adaln)
    for name in ("w1", "b1", "w2", "b2"):
        out[f"{prefix}.{name}"] = getattr(p, name)
    return out


def _named_gates(prefix: str, p: cn.GateParams) -> dict:
    out = {
        f"{prefix}.global_attn": p.global_attn_gate,
        f"{prefix}.global_ffn": p.global_ffn_gate,
    }
    for name in ("sep_attn_w", "sep_attn_b", "sep_ffn_w", "sep_ffn_b"):
        value = getattr(p, name)
        if value is not None:
            out[f"{prefix}.{name}"] = value
    return out


def _named_denoiser(prefix: str, p: df.DenoiserParams) -> dict:
    return {
        f"{prefix}.{name}": getattr(p, name)
        for name in ("w_in", "b_in", "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")
    }


def named_branch_parameters(prefix: str, params: cn.BranchParams) -> dict:
    out = {}
    for lvl, block in enumerate(params.blocks):
        out.update(_named_attn(f"{prefix}.{lvl}.attn", block.attn))
        out.update(_named_ffn(f"{prefix}.{lvl}.ffn", block.ffn))
        out.update(_named_gates(f"{prefix}.{lvl}.gate", block.gates))
    out[f"{prefix}.null"] = params.null_tokens
    return out


def branch_fingerprint(params: cn.BranchParams) -> str:
    named = named_branch_parameters("b", params)
    return content_hash({n: t.data for n, t in named.items()})


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def build_text_model(connector_cfg: cn.ConnectorConfig, diffusion_cfg: df.DiffusionConfig,
                     task: ds.TaskSpec, rng: RngState) -> GenerativeModel:
    """Fresh stage-one model: text path, denoiser, and null text embedding only."""
    connector_cfg.validate()
    task.validate()
    if connector_cfg.d_cond[cn.TEXT_MODALITY] != task.d_text:
        raise ModelError("connector text width differs from the task's d_text")
    if connector_cfg.d_cond[cn.EXTRA_MODALITY] != task.d_modal:
        raise ModelError("connector extra-modality width differs from the task's d_modal")
    params = cn.init_connector(connector_cfg, rng)
    null_text = Tensor(0.02 * rng.normal((task.tokens_per_stream, task.d_text)))
    denoiser = df.init_denoiser(diffusion_cfg, connector_cfg.d_model, connector_cfg.d_time, rng)
    return GenerativeModel(
        connector_cfg=connector_cfg,
        diffusion_cfg=diffusion_cfg,
        task=task,
        connector=params,
        null_text=null_text,
        denoiser=denoiser,
        branches=[],
        stage=STAGE_TEXT,
    )


def add_branch(model: GenerativeModel, factor: str, branch_id: str,
               rng: RngState) -> GenerativeModel:
    """Attach one fresh gated branch for stage-two training."""
    if model.branches:
        raise ModelError("stage-two training expects a model without existing branches")
    if factor not in (ds.FACTOR_ANGLE, ds.FACTOR_RADIUS):
        raise ModelError(f"unknown conditioning factor {factor!r}")
    params = cn.init_branch(model.connector_cfg, rng, model.task.tokens_per_stream)
    spec = BranchSpec(
        branch_id=branch_id,
        factor=factor,
        params=params,
        fingerprint=branch_fingerprint(params),
    )
    model.branches = [spec]
    model.stage = STAGE_BRANCH
    return model


def randomize_parameters(model: GenerativeModel, rng: RngState, scale: float = 0.3) -> None:
    """Overwrite every parameter with random values (gradient-check harnesses).

    Zero-initialized layers and gates stay zero under normal init, which hides
    whole code paths from a derivative check; this lights them all up.
    """
    params = model.named_parameters()
    for name in sorted(params):
        p = params[name]
        p.data = np.asarray(scale * rng.normal(p.data.shape))
