"""Two-stage training with parameter freezing, plus checkpoint persistence.

Stage "pr" trains the text path (latents, resampler blocks, denoiser, null text
embedding) on noise-prediction MSE. Stage "agpr" freezes all of that and trains
exactly one gated branch, so differently-conditioned branches stay composable.
Checkpoints are length-prefixed binary bundles with a trailing content hash.
"""

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import connector as cn
from . import dataset as ds
from . import diffusion as df
from . import model as md
from .numerics import RngState, Tensor, content_hash, tensor_sum

CHECKPOINT_MAGIC = b"MCNDCKP1"
CHECKPOINT_VERSION = 1

STAGE_TEXT_TRAIN = "pr_pretrain"
STAGE_BRANCH_TRAIN = "agpr_train"


class TrainerError(ValueError):
    """Bad policy, stage, or non-finite training state."""


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint file."""


@dataclass(frozen=True)
class TrainPolicy:
    base_lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_iters: int = 1000
    warmup_floor: float = 0.1
    clip_norm: float = 1.0
    batch_size: int = 32
    p_drop: float = 0.1
    # Cells drawn per batch; samples within a cell share connector tokens, which
    # keeps the number of connector forwards per step small.
    cells_per_batch: int = 4

    def validate(self) -> None:
        if not 0.0 < self.warmup_floor <= 1.0:
            raise TrainerError("warmup_floor must lie in (0, 1]")
        if self.clip_norm <= 0:
            raise TrainerError("clip_norm must be positive")
        if self.base_lr <= 0 or self.eps <= 0:
            raise TrainerError("base_lr and eps must be positive")
        if self.warmup_iters < 1:
            raise TrainerError("warmup_iters must be at least 1")
        if self.batch_size < 1 or self.cells_per_batch < 1:
            raise TrainerError("batch_size and cells_per_batch must be positive")
        if self.batch_size % self.cells_per_batch != 0:
            raise TrainerError("batch_size must be divisible by cells_per_batch")
        if not 0.0 <= self.p_drop < 1.0:
            raise TrainerError("p_drop must lie in [0, 1)")


@dataclass
class OptimizerState:
    """First/second moment arrays mirroring the trainable parameters."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "OptimizerState":
        return cls(
            m={n: np.zeros(p.data.shape) for n, p in params.items()},
            v={n: np.zeros(p.data.shape) for n, p in params.items()},
        )


@dataclass
class Partition:
    frozen: tuple
    trainable: tuple


@dataclass
class CheckpointBundle:
    """Serialized model state split into frozen and trainable partitions."""

    config: dict  # canonical nested config sections
    params: dict  # canonical name -> float64 array
    partitions: dict  # canonical name -> "frozen" | "trainable"
    shared_hash: str  # content hash of the shared (non-branch) partition
    meta: dict  # stage, iterations, seed, branch table


def warmup_lr(iteration: int, policy: TrainPolicy) -> float:
    """Linear warmup from floor*base_lr to base_lr, constant afterwards."""
    if iteration < 0:
        raise TrainerError("iteration must be non-negative")
    frac = min(iteration / policy.warmup_iters, 1.0)
    return policy.base_lr * (policy.warmup_floor + (1.0 - policy.warmup_floor) * frac)


def clip_grad_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise TrainerError("max_norm must be positive")
    total_sq = 0.0
    for name in sorted(grads):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainerError(f"non-finite gradient in parameter {name!r}")
        total_sq += float((g * g).sum())
    total = float(np.sqrt(total_sq))
    if total > max_norm:
        scale = max_norm / total
        grads = {n: g * scale for n, g in grads.items()}
    return grads, total


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float,
               policy: TrainPolicy) -> None:
    """Decoupled-weight-decay Adam update with bias-corrected moments."""
    beta1, beta2 = policy.betas
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise TrainerError(f"gradient shape mismatch for {name!r}")
        if name not in state.m:
            raise TrainerError(f"optimizer state missing parameter {name!r}")
        p.data = np.asarray(p.data - lr * policy.weight_decay * p.data)
        m = state.m[name]
        v = state.v[name]
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * (g * g)
        p.data = np.asarray(p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + policy.eps))


def freeze_partition(model: md.GenerativeModel, stage: str) -> Partition:
    """Split parameter names into frozen and trainable sets for a stage.

    Stage one owns everything (and requires that no branch exists yet); stage
    two freezes the whole shared partition and trains only branch parameters.
    The fixed gate scale is a hyperparameter, not a tensor, so it can never
    appear in either set.
    """
    names = sorted(model.named_parameters())
    if stage == STAGE_TEXT_TRAIN:
        if any(n.startswith("branch.") for n in names):
            raise TrainerError("stage-one training must not see branch parameters")
        return Partition(frozen=(), trainable=tuple(names))
    if stage == STAGE_BRANCH_TRAIN:
        trainable = tuple(n for n in names if n.startswith("branch."))
        frozen = tuple(n for n in names if not n.startswith("branch."))
        if not trainable:
            raise TrainerError("stage-two training requires a gated branch")
        return Partition(frozen=frozen, trainable=trainable)
    raise TrainerError(f"unknown training stage {stage!r}")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class LossLogRow:
    iteration: int
    loss: float
    lr: float
    grad_norm: float


def _group_batch(batch: list) -> dict:
    """Group batch rows by identical conditioning so tokens are computed once."""
    groups: dict = {}
    for row_idx, sample in enumerate(batch):
        if sample.dropped:
            key = ("null",)
        else:
            key = ("cond", sample.text_label, sample.modal_label)
        groups.setdefault(key, []).append(row_idx)
    return groups


def _draw_batch(dataset: list, cell_index: dict, policy: TrainPolicy, rng: RngState) -> list:
    cells = list(cell_index)
    per_cell = policy.batch_size // policy.cells_per_batch
    batch = []
    picks = rng.integers(0, len(cells), size=policy.cells_per_batch)
    for pick in picks:
        rows = cell_index[cells[int(pick)]]
        idx = rng.integers(0, len(rows), size=per_cell)
        batch.extend(dataset[rows[int(i)]] for i in idx)
    return batch


def _batch_loss(model: md.GenerativeModel, batch: list, x_t: np.ndarray,
                noise: np.ndarray, te: cn.TimeEmbedding) -> Tensor:
    """Noise-prediction MSE, optionally weighted by per-dimension sample masks."""
    spec = model.branches[0] if model.branches else None
    total = None
    for key, rows in sorted(_group_batch(batch).items()):
        first = batch[rows[0]]
        if key[0] == "null":
            text = cn.ConditionStream(cn.TEXT_MODALITY, model.null_text)
            streams = [cn.ConditionStream(cn.EXTRA_MODALITY, spec.params.null_tokens)] if spec else []
        else:
            text = cn.ConditionStream(cn.TEXT_MODALITY, Tensor(first.text_tokens))
            streams = [cn.ConditionStream(cn.EXTRA_MODALITY, Tensor(first.modal_tokens))] if spec else []
        tokens, _ = model.forward_tokens(text, streams, te.t)
        eps_hat = df.denoiser_forward(model.denoiser, x_t[rows], te, tokens)
        diff = eps_hat - Tensor(noise[rows])
        sq = diff * diff
        if any(batch[r].mask is not None for r in rows):
            weights = np.stack(
                [np.ones_like(s.x) if (s := batch[r]).mask is None else s.mask for r in rows]
            )
            sq = sq * Tensor(weights)
        group_sum = tensor_sum(sq)
        total = group_sum if total is None else total + group_sum
    return total * (1.0 / noise.size)


def train(stage: str, dataset: list, policy: TrainPolicy, iters: int, rng: RngState, *,
          model: md.GenerativeModel, seed: int,
          loss_log: list | None = None, log_every: int = 50,
          progress=None) -> CheckpointBundle:
    """Run noise-prediction training and snapshot the result as a bundle.

    One uniform timestep is drawn per iteration; conditioning dropout, batch
    draws, and noise all come from `rng` in a fixed order, so identical seeds
    give bit-identical checkpoints.
    """
    policy.validate()
    if stage not in (STAGE_TEXT_TRAIN, STAGE_BRANCH_TRAIN):
        raise TrainerError(f"unknown training stage {stage!r}")
    partition = freeze_partition(model, stage)
    params = model.named_parameters()
    model.set_requires_grad(partition.frozen, False)
    model.set_requires_grad(partition.trainable, True)
    trainable = {n: params[n] for n in partition.trainable}
    state = OptimizerState.for_params(trainable)
    sched = df.build_schedule(model.diffusion_cfg)

    cell_index: dict = {}
    for idx, s in enumerate(dataset):
        cell_index.setdefault((s.text_label, s.modal_label), []).append(idx)
    if not cell_index:
        raise TrainerError("empty training dataset")

    for it in range(iters):
        batch = _draw_batch(dataset, cell_index, policy, rng)
        batch = ds.condition_dropout(batch, policy.p_drop, rng)
        t = int(rng.integers(0, sched.t_max))
        te = cn.time_embed(t, model.d_time)
        x0 = np.stack([s.x for s in batch])
        noise = rng.normal(x0.shape)
        x_t = df.q_sample(x0, t, noise, sched)

        for p in trainable.values():
            p.grad = None
        loss = _batch_loss(model, batch, x_t, noise, te)
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            raise TrainerError(f"non-finite loss at iteration {it}")
        loss.backward()

        grads = {
            n: (p.grad if p.grad is not None else np.zeros(p.data.shape))
            for n, p in trainable.items()
        }
        grads, grad_norm = clip_grad_norm(grads, policy.clip_norm)
        lr = warmup_lr(it, policy)
        adamw_step(trainable, grads, state, lr, policy)

        if loss_log is not None:
            loss_log.append(LossLogRow(it, loss_value, lr, grad_norm))
        if progress is not None and it % log_every == 0:
            progress(it, loss_value)

    model.set_requires_grad(partition.trainable, False)
    return bundle_from_model(model, iterations=iters, seed=seed)


# ---------------------------------------------------------------------------
# bundle <-> model conversion
# ---------------------------------------------------------------------------


def config_dict(model: md.GenerativeModel) -> dict:
    return {
        "connector": {
            "n_tokens": model.connector_cfg.n_tokens,
            "d_model": model.connector_cfg.d_model,
            "n_heads": model.connector_cfg.n_heads,
            "d_time": model.connector_cfg.d_time,
            "depth": model.connector_cfg.depth,
            "gate_scale": model.connector_cfg.gate_scale,
            "d_cond": dict(model.connector_cfg.d_cond),
            "gate_mode": model.connector_cfg.gate_mode,
        },
        "diffusion": dict(model.diffusion_cfg.__dict__),
        "task": dict(model.task.__dict__),
    }


def bundle_from_model(model: md.GenerativeModel, iterations: int, seed: int) -> CheckpointBundle:
    named = model.named_parameters()
    arrays = {n: named[n].data.copy() for n in named}
    shared = [n for n in arrays if not n.startswith("branch.")]
    if model.stage == md.STAGE_TEXT:
        partitions = {n: "trainable" for n in arrays}
    elif model.stage == md.STAGE_BRANCH:
        partitions = {n: ("trainable" if n.startswith("branch.") else "frozen") for n in arrays}
    else:
        partitions = {n: "frozen" for n in arrays}
    meta = {
        "stage": model.stage,
        "iterations": iterations,
        "seed": seed,
        "gate_mode": model.connector_cfg.gate_mode,
        "branches": [
            {
                "branch_id": spec.branch_id,
                "factor": spec.factor,
                "blend": spec.blend,
                "time_override": spec.time_override,
                "fingerprint": spec.fingerprint,
            }
            for spec in model.branches
        ],
    }
    return CheckpointBundle(
        config=config_dict(model),
        params=arrays,
        partitions=partitions,
        shared_hash=content_hash({n: arrays[n] for n in shared}),
        meta=meta,
    )


def model_from_bundle(bundle: CheckpointBundle) -> md.GenerativeModel:
    """Rebuild a model whose parameter arrays are copies of the bundle blobs."""
    cfg = cn.ConnectorConfig(**bundle.config["connector"])
    diff = df.DiffusionConfig(**bundle.config["diffusion"])
    task = ds.TaskSpec(**bundle.config["task"])
    rng = RngState(0)  # structure only; every array is overwritten below
    m = md.build_text_model(cfg, diff, task, rng)
    m.stage = bundle.meta["stage"]
    m.meta = dict(bundle.meta)
    for b_meta in bundle.meta["branches"]:
        params = cn.init_branch(cfg, rng, task.tokens_per_stream)
        m.branches.append(
            md.BranchSpec(
                branch_id=b_meta["branch_id"],
                factor=b_meta["factor"],
                params=params,
                blend=b_meta["blend"],
                time_override=b_meta["time_override"],
            )
        )
    named = m.named_parameters()
    if sorted(named) != sorted(bundle.params):
        raise CheckpointError("bundle parameter names do not match the rebuilt model")
    for name, tensor in named.items():
        blob = bundle.params[name]
        if blob.shape != tensor.data.shape:
            raise CheckpointError(f"shape mismatch for parameter {name!r}")
        tensor.data = blob.copy()
    for idx, spec in enumerate(m.branches):
        spec.fingerprint = md.branch_fingerprint(spec.params)
    return m


# ---------------------------------------------------------------------------
# binary checkpoint format
# ---------------------------------------------------------------------------


def _write_section(out: io.BytesIO, payload: bytes) -> None:
    out.write(struct.pack("<Q", len(payload)))
    out.write(payload)


def _params_payload(bundle: CheckpointBundle) -> bytes:
    buf = io.BytesIO()
    names = sorted(bundle.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        label = bundle.partitions[name]
        buf.write(struct.pack("<B", 0 if label == "frozen" else 1))
        arr = np.ascontiguousarray(bundle.params[name], dtype="<f8")
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(bundle: CheckpointBundle, path: str) -> None:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta = dict(bundle.meta)
    meta["shared_hash"] = bundle.shared_hash
    _write_section(out, json.dumps(meta, sort_keys=True).encode())
    _write_section(out, json.dumps(bundle.config, sort_keys=True).encode())
    _write_section(out, _params_payload(bundle))
    body = out.getvalue()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def load_checkpoint(path: str) -> CheckpointBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 4 + 32:
        raise CheckpointError("checkpoint file is truncated")
    body, trailing = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != trailing:
        raise CheckpointError("checkpoint content hash mismatch")
    view = io.BytesIO(body)
    if view.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    (version,) = struct.unpack("<I", view.read(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(_read_section(view))
    config = json.loads(_read_section(view))
    params, partitions = _parse_params(_read_section(view))
    shared_hash = meta.pop("shared_hash")
    recomputed = content_hash({n: a for n, a in params.items() if not n.startswith("branch.")})
    if recomputed != shared_hash:
        raise CheckpointError("shared-partition hash does not match its recomputation")
    return CheckpointBundle(
        config=config, params=params, partitions=partitions,
        shared_hash=shared_hash, meta=meta,
    )


def _read_section(view: io.BytesIO) -> bytes:
    header = view.read(8)
    if len(header) != 8:
        raise CheckpointError("checkpoint file is truncated")
    (length,) = struct.unpack("<Q", header)
    payload = view.read(length)
    if len(payload) != length:
        raise CheckpointError("checkpoint file is truncated")
    return payload


def _parse_params(payload: bytes) -> tuple[dict, dict]:
    view = io.BytesIO(payload)
    (count,) = struct.unpack("<I", view.read(4))
    params: dict = {}
    partitions: dict = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", view.read(2))
        name = view.read(name_len).decode()
        (label,) = struct.unpack("<B", view.read(1))
        (ndim,) = struct.unpack("<B", view.read(1))
        shape = tuple(struct.unpack("<I", view.read(4))[0] for _ in range(ndim))
        n_bytes = 8 * int(np.prod(shape)) if shape else 8
        raw = view.read(n_bytes)
        if len(raw) != n_bytes:
            raise CheckpointError("checkpoint file is truncated")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        partitions[name] = "frozen" if label == 0 else "trainable"
    return params, partitions
