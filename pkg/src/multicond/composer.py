"""Training-free assembly of independently trained gated branches.

Branches trained against the same frozen shared partition can be merged into a
single multi-condition model: every gated level sums the branches' blended
updates in a canonical order, so nothing is retrained and list order never
matters. Merging refuses models whose shared partitions are not byte-identical.
"""

import json
from dataclasses import dataclass

from . import connector as cn
from . import model as md
from . import trainer as tr


class ComposeError(ValueError):
    """Checkpoints that cannot legally be merged."""


@dataclass
class ManifestEntry:
    checkpoint_path: str
    blend_weight: float = 1.0
    time_override: int | None = None


def _comparable_config(config: dict) -> str:
    """Canonical config text with per-branch fields masked out.

    The factor a branch conditions on (and hence which codebook its stream uses)
    legitimately differs between branch checkpoints; everything else must match.
    """
    trimmed = json.loads(json.dumps(config, sort_keys=True))
    trimmed.get("task", {}).pop("modal_factor", None)
    return json.dumps(trimmed, sort_keys=True)


def merge_checkpoints(bundles: list, blend_weights: list,
                      time_overrides: list | None = None) -> md.GenerativeModel:
    """Merge single-branch checkpoints into one composed model.

    Inputs must share configs and byte-identical shared partitions. No source
    parameter is modified; branches are stored in canonical (branch_id,
    fingerprint) order so any input permutation produces the same model.
    """
    if not bundles:
        raise ComposeError("merge requires at least one checkpoint")
    if len(blend_weights) != len(bundles):
        raise ComposeError("one blend weight per checkpoint is required")
    if time_overrides is None:
        time_overrides = [None] * len(bundles)

    reference = bundles[0]
    ref_config = _comparable_config(reference.config)
    for idx, bundle in enumerate(bundles):
        if not bundle.meta.get("branches"):
            raise ComposeError(f"checkpoint #{idx} has no gated branch to compose")
        if len(bundle.meta["branches"]) != 1:
            raise ComposeError(f"checkpoint #{idx} is already a composed bundle")
        if _comparable_config(bundle.config) != ref_config:
            raise ComposeError(f"checkpoint #{idx} config differs from checkpoint #0")
        if bundle.shared_hash != reference.shared_hash:
            raise ComposeError(
                f"checkpoint #{idx} shared-partition hash {bundle.shared_hash[:12]} "
                f"differs from checkpoint #0 hash {reference.shared_hash[:12]}"
            )

    composed = tr.model_from_bundle(reference)
    composed.branches = []
    for bundle, blend, override in zip(bundles, blend_weights, time_overrides):
        source = tr.model_from_bundle(bundle)
        spec = source.branches[0]
        spec.blend = float(blend)
        spec.time_override = override
        composed.branches.append(spec)
    composed.branches.sort(key=lambda s: (s.branch_id, s.fingerprint, s.blend))
    composed.stage = md.STAGE_COMPOSED
    composed.meta = {
        "stage": md.STAGE_COMPOSED,
        "iterations": 0,
        "seed": reference.meta.get("seed", 0),
        "sources": [b.meta.get("branches")[0]["branch_id"] for b in bundles],
    }
    return composed


def composed_agpr_level(latents, branch_inputs: list, level: int, te, n_heads: int,
                        record_gates: bool = False):
    """One gated level over many branches: blended attention sums, then FFN sums."""
    return cn.gated_level(latents, branch_inputs, level, te, n_heads, record_gates)


def composed_forward(composed: md.GenerativeModel, text_stream: cn.ConditionStream,
                     per_branch_streams: list, t: int, record_gates: bool = False):
    """Alternate shared resampler levels with composed gated levels."""
    return composed.forward_tokens(text_stream, per_branch_streams, t, record_gates)


# ---------------------------------------------------------------------------
# composition manifest
# ---------------------------------------------------------------------------


def parse_manifest(path: str) -> list[ManifestEntry]:
    """One branch per line: `checkpoint_path blend_weight [time_override]`."""
    entries = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise ComposeError(
                    f"manifest line {line_no}: expected `path blend [time_override]`"
                )
            entries.append(
                ManifestEntry(
                    checkpoint_path=parts[0],
                    blend_weight=float(parts[1]),
                    time_override=int(parts[2]) if len(parts) == 3 else None,
                )
            )
    if not entries:
        raise ComposeError("manifest lists no branches")
    return entries
