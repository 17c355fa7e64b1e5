"""Single entry point for the experiment lifecycle.

Subcommands: train, generate, compose, gate-viz, gradcheck. Every command is
deterministic given its seed and inputs, reads no environment variables, and
never mutates its input files. Exit codes: 0 success, 2 usage/validation,
3 missing capability, 4 composition mismatch, 5 verification failure.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import composer as cp
from . import connector as cn
from . import dataset as ds
from . import diffusion as df
from . import evalviz as ev
from . import model as md
from . import trainer as tr
from .dataset import format_float
from .numerics import GradCheckReport, RngState, grad_check
from .numerics import mean as nm_mean

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_CAPABILITY = 3
EXIT_COMPOSE_MISMATCH = 4
EXIT_VERIFY_FAILED = 5

GRADCHECK_MAX_PARAMS = 20_000
SPARSITY_THRESHOLD = 0.5


class UsageError(ValueError):
    """Invalid flags or config contents; maps to exit code 2."""


class MissingCapabilityError(ValueError):
    """A requested conditioning channel the checkpoint does not provide."""


@dataclass(frozen=True)
class RunConfig:
    seed: int
    connector: cn.ConnectorConfig
    diffusion: df.DiffusionConfig
    train: tr.TrainPolicy
    task: ds.TaskSpec


def _build_section(cls, section: dict, name: str):
    fields = getattr(cls, "__dataclass_fields__")
    unknown = set(section) - set(fields)
    if unknown:
        raise UsageError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise UsageError(f"bad config section {name!r}: {exc}") from exc


def load_run_config(path: str) -> RunConfig:
    """Parse and fully validate a JSON run config; unknown keys are errors."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    known = {"seed", "connector", "diffusion", "train", "task"}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown top-level config keys: {sorted(unknown)}")
    connector = _build_section(cn.ConnectorConfig, raw.get("connector", {}), "connector")
    diffusion = _build_section(df.DiffusionConfig, raw.get("diffusion", {}), "diffusion")
    train_section = dict(raw.get("train", {}))
    if "betas" in train_section:
        train_section["betas"] = tuple(train_section["betas"])
    train = _build_section(tr.TrainPolicy, train_section, "train")
    task = _build_section(ds.TaskSpec, raw.get("task", {}), "task")
    try:
        connector.validate()
        diffusion.validate()
        train.validate()
        task.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if connector.d_cond[cn.TEXT_MODALITY] != task.d_text:
        raise UsageError("connector d_cond[text_proxy] must equal task d_text")
    if connector.d_cond[cn.EXTRA_MODALITY] != task.d_modal:
        raise UsageError("connector d_cond[extra_modality] must equal task d_modal")
    return RunConfig(
        seed=int(raw.get("seed", 0)),
        connector=connector,
        diffusion=diffusion,
        train=train,
        task=task,
    )


def _with_task(config: RunConfig, **overrides) -> RunConfig:
    task = ds.TaskSpec(**{**config.task.__dict__, **overrides})
    return RunConfig(config.seed, config.connector, config.diffusion, config.train, task)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _loss_log_path(out_path: str) -> str:
    return out_path + ".loss.csv"


def _check_stage_compat(model: md.GenerativeModel, config: RunConfig) -> None:
    """The stage-two config must match the base checkpoint (modal factor aside)."""
    if model.connector_cfg != config.connector:
        raise UsageError("config connector section differs from the --init checkpoint")
    if model.diffusion_cfg != config.diffusion:
        raise UsageError("config diffusion section differs from the --init checkpoint")
    base_task = {k: v for k, v in model.task.__dict__.items() if k != "modal_factor"}
    new_task = {k: v for k, v in config.task.__dict__.items() if k != "modal_factor"}
    if base_task != new_task:
        raise UsageError("config task section differs from the --init checkpoint "
                         "(only modal_factor may change)")


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    seed = config.seed if args.seed is None else args.seed
    rng = RngState(seed)
    if args.stage == "agpr":
        if args.init is None:
            raise UsageError("--init is required for --stage agpr")
        if args.modality is None:
            raise UsageError("--modality is required for --stage agpr")
        if args.modality not in (ds.FACTOR_ANGLE, ds.FACTOR_RADIUS):
            raise UsageError(f"--modality must be one of angle|radius, got {args.modality!r}")
        config = _with_task(config, modal_factor=args.modality)
        bundle = tr.load_checkpoint(args.init)
        if bundle.meta["stage"] != md.STAGE_TEXT:
            raise UsageError("--init must point at a stage-pr checkpoint")
        model = tr.model_from_bundle(bundle)
        _check_stage_compat(model, config)
        model.task = config.task
        model._codebooks = None
        md.add_branch(model, args.modality, args.modality, rng.split("branch_init"))
        stage = tr.STAGE_BRANCH_TRAIN
    else:
        model = md.build_text_model(
            config.connector, config.diffusion, config.task, rng.split("init")
        )
        stage = tr.STAGE_TEXT_TRAIN
    dataset = ds.gen_dataset(config.task)
    rows: list[tr.LossLogRow] = []
    bundle = tr.train(
        stage, dataset, config.train, args.iters, rng.split("train"),
        model=model, seed=seed, loss_log=rows,
        progress=lambda it, loss: print(f"iter {it}: loss {format_float(loss)}"),
    )
    tr.save_checkpoint(bundle, args.out)
    with open(_loss_log_path(args.out), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "loss", "lr", "grad_norm"])
        for row in rows:
            writer.writerow([
                row.iteration, format_float(row.loss),
                format_float(row.lr), format_float(row.grad_norm),
            ])
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def read_conditions(path: str) -> list[dict]:
    """Condition rows: CSV with header text,angle,radius; -1 means unspecified."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["text", "angle", "radius"]:
            raise UsageError("conditions file must have header `text,angle,radius`")
        for raw in reader:
            if len(raw) != 3:
                raise UsageError(f"bad conditions row: {raw}")
            text, angle, radius = (int(v) for v in raw)
            rows.append({"text": text, "angle": angle, "radius": radius})
    if not rows:
        raise UsageError("conditions file lists no rows")
    return rows


def _assignment_for(model: md.GenerativeModel, cond: dict) -> tuple:
    """Map a conditions row onto the model's channels.

    Returns (ConditionAssignment, angle_target, radius_target) where targets are
    the geometry classes the row is asking for (-1 when unspecified).
    """
    text = cond["text"]
    branch_labels: dict = {}
    angle_target, radius_target = -1, -1

    if text >= 0:
        if model.task.text_mode != ds.TEXT_MODE_CLASS:
            raise MissingCapabilityError("checkpoint has no class-conditioned text channel")
        if text >= model.task.n_text_classes:
            raise UsageError(f"text class {text} out of range")
        angle_target = text

    for factor, wanted in ((ds.FACTOR_ANGLE, cond["angle"]), (ds.FACTOR_RADIUS, cond["radius"])):
        if wanted < 0:
            continue
        matching = [b for b in model.branches if b.factor == factor]
        if not matching:
            raise MissingCapabilityError(f"checkpoint has no {factor!r} conditioning branch")
        if wanted >= model.task.n_classes(factor):
            raise UsageError(f"{factor} class {wanted} out of range")
        for spec in matching:
            branch_labels[spec.branch_id] = wanted
        if factor == ds.FACTOR_ANGLE:
            if angle_target >= 0 and angle_target != wanted:
                raise UsageError("text and angle columns disagree on the target angle")
            angle_target = wanted
        else:
            radius_target = wanted

    assignment = md.ConditionAssignment(
        text_label=text if text >= 0 else None, branch_labels=branch_labels
    )
    return assignment, angle_target, radius_target


def write_samples_csv(path: str, batches: list, labels: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "dim0", "dim1", "condition_label"])
        sample_id = 0
        for points, label in zip(batches, labels):
            for row in points:
                writer.writerow([sample_id, format_float(row[0]), format_float(row[1]), label])
                sample_id += 1


def cmd_generate(args) -> int:
    bundle = tr.load_checkpoint(args.ckpt)
    model = tr.model_from_bundle(bundle)
    conditions = read_conditions(args.conditions)
    assignments, labels = [], []
    for cond in conditions:
        assignment, angle_target, radius_target = _assignment_for(model, cond)
        assignments.append(assignment)
        labels.append(f"{angle_target}:{radius_target}")
    rng = RngState(args.seed)
    batches = df.sample(
        model, assignments, args.n, model.diffusion_cfg, rng, guidance=args.guidance
    )
    write_samples_csv(args.out, batches, labels)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compose
# ---------------------------------------------------------------------------


def cmd_compose(args) -> int:
    entries = cp.parse_manifest(args.manifest)
    bundles = []
    for entry in entries:
        try:
            bundles.append(tr.load_checkpoint(entry.checkpoint_path))
        except (OSError, tr.CheckpointError) as exc:
            raise UsageError(f"cannot load {entry.checkpoint_path}: {exc}") from exc
    try:
        composed = cp.merge_checkpoints(
            bundles,
            [e.blend_weight for e in entries],
            [e.time_override for e in entries],
        )
    except cp.ComposeError as exc:
        print(f"composition mismatch: {exc}", file=sys.stderr)
        print("offending files: " + " ".join(e.checkpoint_path for e in entries), file=sys.stderr)
        return EXIT_COMPOSE_MISMATCH
    print(f"shared-partition hash verified: {bundles[0].shared_hash[:16]} "
          f"across {len(bundles)} checkpoint(s)")
    out_bundle = tr.bundle_from_model(composed, iterations=0,
                                      seed=composed.meta.get("seed", 0))
    tr.save_checkpoint(out_bundle, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gate-viz
# ---------------------------------------------------------------------------


def cmd_gate_viz(args) -> int:
    bundle = tr.load_checkpoint(args.ckpt)
    model = tr.model_from_bundle(bundle)
    if args.probe_config is not None:
        load_run_config(args.probe_config)  # validated; probe uses checkpoint config
    os.makedirs(args.out, exist_ok=True)
    heatmaps = ev.probe_gate_heatmaps(model)
    for branch_id, maps in sorted(heatmaps.items()):
        ev.export_gate_heatmap(maps, ev.heatmap_path(args.out, branch_id))
    ev.write_sparsity_summary(heatmaps, SPARSITY_THRESHOLD,
                              os.path.join(args.out, "sparsity.txt"))
    print(f"wrote heatmaps for {len(heatmaps)} branch(es) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def gradcheck_report(config: RunConfig) -> GradCheckReport:
    """Compare reverse-mode gradients of a full connector loss to differences.

    All parameters (including the zero-initialized gates and projections) are
    randomized first so every code path carries gradient. The loss is a scaled
    mean square of the output tokens; the scale keeps finite-difference noise
    below the relative-error floor.
    """
    rng = RngState(config.seed)
    model = md.build_text_model(config.connector, config.diffusion, config.task,
                                rng.split("init"))
    md.add_branch(model, config.task.modal_factor, "probe", rng.split("branch"))
    md.randomize_parameters(model, rng.split("randomize"))
    books = model.codebooks
    text = cn.ConditionStream(cn.TEXT_MODALITY, books.text[0])
    stream = cn.ConditionStream(cn.EXTRA_MODALITY, books.modal(config.task.modal_factor)[0])
    te = cn.time_embed(config.diffusion.t_max // 2, config.connector.d_time)
    params = connector_check_params(model)
    branch_blocks = model.branches[0].params.blocks

    def loss_fn(p: dict):
        connector = cn.ConnectorParams(
            latents=p["latents"],
            blocks=_rebind_text_blocks(model.connector, p),
        )
        branches = [cn.BranchInput(blocks=_rebind_branch_blocks(branch_blocks, p), stream=stream)]
        tokens, _ = cn.connector_forward(config.connector, connector, text, branches, te)
        return 1e-3 * nm_mean(tokens * tokens)

    return grad_check(loss_fn, params)


def connector_check_params(model: md.GenerativeModel) -> dict:
    """The parameters a full connector loss actually touches."""
    skip = ("denoiser.", "null_text", "branch.0.null")
    return {
        n: t for n, t in model.named_parameters().items()
        if not n.startswith(skip[0]) and n not in skip[1:]
    }


def _rebind_text_blocks(connector: cn.ConnectorParams, p: dict) -> list:
    return [
        cn.ResamplerBlockParams(
            attn=_rebind_attn(f"text.{lvl}.attn", block.attn, p),
            ffn=_rebind_ffn(f"text.{lvl}.ffn", block.ffn, p),
        )
        for lvl, block in enumerate(connector.blocks)
    ]


def _rebind_branch_blocks(blocks: list, p: dict) -> list:
    return [
        cn.GatedBlockParams(
            attn=_rebind_attn(f"branch.0.{lvl}.attn", block.attn, p),
            ffn=_rebind_ffn(f"branch.0.{lvl}.ffn", block.ffn, p),
            gates=cn.GateParams(
                gate_scale=block.gates.gate_scale,
                global_attn_gate=p[f"branch.0.{lvl}.gate.global_attn"],
                global_ffn_gate=p[f"branch.0.{lvl}.gate.global_ffn"],
                sep_attn_w=p.get(f"branch.0.{lvl}.gate.sep_attn_w"),
                sep_attn_b=p.get(f"branch.0.{lvl}.gate.sep_attn_b"),
                sep_ffn_w=p.get(f"branch.0.{lvl}.gate.sep_ffn_w"),
                sep_ffn_b=p.get(f"branch.0.{lvl}.gate.sep_ffn_b"),
            ),
        )
        for lvl, block in enumerate(blocks)
    ]


def _rebind_adaln(prefix: str, p: dict) -> cn.AdaLNParams:
    return cn.AdaLNParams(
        w_hidden=p[f"{prefix}.w_hidden"], b_hidden=p[f"{prefix}.b_hidden"],
        w_scale=p[f"{prefix}.w_scale"], b_scale=p[f"{prefix}.b_scale"],
        w_shift=p[f"{prefix}.w_shift"], b_shift=p[f"{prefix}.b_shift"],
    )


def _rebind_attn(prefix: str, template: cn.AttnParams, p: dict) -> cn.AttnParams:
    return cn.AttnParams(
        modality=template.modality,
        adaln=_rebind_adaln(f"{prefix}.adaln", p),
        w_in=p[f"{prefix}.w_in"], b_in=p[f"{prefix}.b_in"],
        wq=p[f"{prefix}.wq"], bq=p[f"{prefix}.bq"],
        wk=p[f"{prefix}.wk"],
        wv=p[f"{prefix}.wv"], bv=p[f"{prefix}.bv"],
        wo=p[f"{prefix}.wo"], bo=p[f"{prefix}.bo"],
    )


def _rebind_ffn(prefix: str, template: cn.FFNParams, p: dict) -> cn.FFNParams:
    return cn.FFNParams(
        adaln=_rebind_adaln(f"{prefix}.adaln", p),
        w1=p[f"{prefix}.w1"], b1=p[f"{prefix}.b1"],
        w2=p[f"{prefix}.w2"], b2=p[f"{prefix}.b2"],
    )


def cmd_gradcheck(args) -> int:
    config = load_run_config(args.config)
    model = md.build_text_model(config.connector, config.diffusion, config.task, RngState(0))
    md.add_branch(model, config.task.modal_factor, "probe", RngState(1))
    total = sum(p.data.size for p in connector_check_params(model).values())
    if total > GRADCHECK_MAX_PARAMS:
        raise UsageError(
            f"gradcheck config has {total} parameters; limit is {GRADCHECK_MAX_PARAMS}"
        )
    report = gradcheck_report(config)
    print(f"max_rel_err={format_float(report.max_rel_err)} "
          f"worst_param={report.worst_param} worst_index={report.worst_index}")
    if report.max_rel_err < args.tolerance:
        print("gradcheck: PASS")
        return EXIT_OK
    print(f"gradcheck: FAIL (tolerance {format_float(args.tolerance)})", file=sys.stderr)
    return EXIT_VERIFY_FAILED


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multicond",
        description="Train, compose, and sample the toy multi-condition pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training stage")
    p_train.add_argument("--stage", choices=["pr", "agpr"], required=True)
    p_train.add_argument("--modality", choices=[ds.FACTOR_ANGLE, ds.FACTOR_RADIUS])
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--init", help="stage-pr checkpoint to extend (agpr only)")
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--iters", type=int, required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_gen = sub.add_parser("generate", help="sample from a checkpoint")
    p_gen.add_argument("--ckpt", required=True)
    p_gen.add_argument("--conditions", required=True)
    p_gen.add_argument("--n", type=int, required=True)
    p_gen.add_argument("--guidance", type=float, default=None)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_generate)

    p_comp = sub.add_parser("compose", help="merge branch checkpoints without training")
    p_comp.add_argument("--manifest", required=True)
    p_comp.add_argument("--out", required=True)
    p_comp.set_defaults(func=cmd_compose)

    p_viz = sub.add_parser("gate-viz", help="export per-branch gate heatmaps")
    p_viz.add_argument("--ckpt", required=True)
    p_viz.add_argument("--probe-config", default=None)
    p_viz.add_argument("--out", required=True)
    p_viz.set_defaults(func=cmd_gate_viz)

    p_gc = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p_gc.add_argument("--config", required=True)
    p_gc.add_argument("--tolerance", type=float, default=1e-4)
    p_gc.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingCapabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_CAPABILITY
    except (tr.CheckpointError, tr.TrainerError, cp.ComposeError, ds.DatasetError,
            cn.ConnectorError, df.DiffusionError, md.ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
