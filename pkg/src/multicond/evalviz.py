"""Adherence scoring for generated samples and gate-value exports.

Generated points are classified to the nearest ring-grid cell mean; per-factor
accuracy is the fraction that land on the intended angle or radius class. Gate
heatmaps average absolute per-token gate values over a fixed probe batch and a
fixed timestep grid, one file per branch.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import connector as cn
from . import dataset as ds
from .dataset import format_float

HEATMAP_KINDS = ("attn", "ffn")
PROBE_GRID_FRACTIONS = (0.0, 0.25, 0.5, 0.75)


class EvalError(ValueError):
    """Empty inputs or malformed heatmap files."""


@dataclass
class AdherenceReport:
    text_acc: float
    modal_acc: float
    joint_acc: float
    n: int

    def as_text(self) -> str:
        return (
            f"text_acc={format_float(self.text_acc)}\n"
            f"modal_acc={format_float(self.modal_acc)}\n"
            f"joint_acc={format_float(self.joint_acc)}\n"
            f"n={self.n}\n"
        )


@dataclass
class GateHeatmap:
    """|gate| magnitudes, (depth, n_tokens); values quantized to the CSV format."""

    values: np.ndarray
    branch_id: str
    kind: str

    def __post_init__(self):
        if self.kind not in HEATMAP_KINDS:
            raise EvalError(f"unknown heatmap kind {self.kind!r}")
        # Quantize at construction so export -> parse round-trips exactly.
        self.values = np.array(
            [[float(format_float(v)) for v in row] for row in np.atleast_2d(self.values)]
        )


def classify_points(points: np.ndarray, spec: ds.TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-cell-mean labels: (angle classes, radius classes)."""
    means = ds.all_cell_means(spec).reshape(-1, 2)
    d2 = ((points[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    flat = d2.argmin(axis=1)
    return flat // spec.n_modal_classes, flat % spec.n_modal_classes


def adherence_score(points: np.ndarray, text_targets: np.ndarray,
                    modal_targets: np.ndarray, spec: ds.TaskSpec) -> AdherenceReport:
    """Per-factor and joint accuracy against intended cells.

    Target entries of -1 mean "unspecified"; such rows are excluded from that
    factor's accuracy, and from the joint accuracy unless both are specified.
    A factor with no specified rows reports accuracy 0.0.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise EvalError("adherence_score needs a non-empty (n, 2) sample array")
    text_targets = np.asarray(text_targets)
    modal_targets = np.asarray(modal_targets)
    pred_text, pred_modal = classify_points(points, spec)
    text_rows = text_targets >= 0
    modal_rows = modal_targets >= 0
    joint_rows = text_rows & modal_rows
    text_acc = float((pred_text[text_rows] == text_targets[text_rows]).mean()) if text_rows.any() else 0.0
    modal_acc = float((pred_modal[modal_rows] == modal_targets[modal_rows]).mean()) if modal_rows.any() else 0.0
    joint_acc = (
        float(((pred_text[joint_rows] == text_targets[joint_rows])
               & (pred_modal[joint_rows] == modal_targets[joint_rows])).mean())
        if joint_rows.any() else 0.0
    )
    return AdherenceReport(text_acc=text_acc, modal_acc=modal_acc, joint_acc=joint_acc,
                           n=len(points))


# ---------------------------------------------------------------------------
# gate heatmaps
# ---------------------------------------------------------------------------


def heatmaps_from_records(record_sets: list, branch_id: str) -> dict:
    """Average |gate| over a list of per-level GateRecord lists.

    Each element of `record_sets` is one forward pass's records for this branch
    (length depth). Returns {"attn": GateHeatmap, "ffn": GateHeatmap}.
    """
    if not record_sets:
        raise EvalError("no gate records to aggregate")
    depth = len(record_sets[0])
    n_tokens = len(record_sets[0][0].token_gates_attn)
    acc = {kind: np.zeros((depth, n_tokens)) for kind in HEATMAP_KINDS}
    for records in record_sets:
        for rec in records:
            acc["attn"][rec.layer_index] += np.abs(rec.token_gates_attn)
            acc["ffn"][rec.layer_index] += np.abs(rec.token_gates_ffn)
    out = {}
    for kind in HEATMAP_KINDS:
        out[kind] = GateHeatmap(values=acc[kind] / len(record_sets), branch_id=branch_id,
                                kind=kind)
    return out


def probe_timesteps(t_max: int) -> list[int]:
    return [int(frac * t_max) for frac in PROBE_GRID_FRACTIONS]


def probe_gate_heatmaps(model, probe_labels: dict | None = None) -> dict:
    """Run the fixed probe batch and aggregate each branch's gate magnitudes.

    The probe batch is every class of each branch's factor (all other branches
    held at their null stream), crossed with the timestep grid. Returns
    {branch_id: {"attn": GateHeatmap, "ffn": GateHeatmap}}.
    """
    out = {}
    for b_idx, spec in enumerate(model.branches):
        record_sets = []
        n_classes = model.task.n_classes(spec.factor)
        labels = probe_labels.get(spec.branch_id) if probe_labels else None
        classes = labels if labels is not None else range(n_classes)
        for t in probe_timesteps(model.diffusion_cfg.t_max):
            for label in classes:
                text = model.text_stream(None)
                streams = [
                    model.branch_stream(other, label if other is spec else None)
                    for other in model.branches
                ]
                _, records = model.forward_tokens(text, streams, t, record_gates=True)
                record_sets.append(records[b_idx])
        out[spec.branch_id] = heatmaps_from_records(record_sets, spec.branch_id)
    return out


def export_gate_heatmap(heatmaps: dict, path: str) -> None:
    """Write one branch's attn/ffn heatmaps as `layer,token,attn_gate,ffn_gate` rows."""
    attn, ffn = heatmaps["attn"], heatmaps["ffn"]
    if attn.values.shape != ffn.values.shape:
        raise EvalError("attn and ffn heatmaps must share a shape")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "token", "attn_gate", "ffn_gate"])
        depth, n_tokens = attn.values.shape
        for layer in range(depth):
            for token in range(n_tokens):
                writer.writerow([
                    layer, token,
                    format_float(attn.values[layer, token]),
                    format_float(ffn.values[layer, token]),
                ])


def parse_gate_heatmap(path: str, branch_id: str = "") -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["layer", "token", "attn_gate", "ffn_gate"]:
            raise EvalError(f"unexpected heatmap header: {header}")
        rows = [(int(r[0]), int(r[1]), float(r[2]), float(r[3])) for r in reader]
    if not rows:
        raise EvalError("heatmap file has no data rows")
    depth = max(r[0] for r in rows) + 1
    n_tokens = max(r[1] for r in rows) + 1
    attn = np.zeros((depth, n_tokens))
    ffn = np.zeros((depth, n_tokens))
    for layer, token, a, f in rows:
        attn[layer, token] = a
        ffn[layer, token] = f
    return {
        "attn": GateHeatmap(values=attn, branch_id=branch_id, kind="attn"),
        "ffn": GateHeatmap(values=ffn, branch_id=branch_id, kind="ffn"),
    }


def gate_sparsity(heatmap: GateHeatmap, q: float) -> float:
    """Fraction of entries below q times the max magnitude; all-zero maps are 1.0."""
    if not 0.0 < q < 1.0:
        raise EvalError("q must lie in (0, 1)")
    values = np.abs(heatmap.values)
    if values.size == 0:
        raise EvalError("empty heatmap")
    peak = values.max()
    if peak == 0.0:
        return 1.0
    return float((values < q * peak).mean())


def top_quartile_tokens(heatmaps: dict) -> tuple:
    """Token indices in the top quarter by |gate| summed over layers and kinds."""
    combined = np.abs(heatmaps["attn"].values).sum(axis=0) + np.abs(heatmaps["ffn"].values).sum(axis=0)
    n_tokens = combined.shape[0]
    k = max(1, int(np.ceil(n_tokens / 4)))
    order = np.argsort(-combined, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def write_sparsity_summary(heatmaps_by_branch: dict, q: float, path: str) -> None:
    lines = []
    for branch_id in sorted(heatmaps_by_branch):
        for kind in HEATMAP_KINDS:
            value = gate_sparsity(heatmaps_by_branch[branch_id][kind], q)
            lines.append(f"{branch_id}.{kind}_sparsity={format_float(value)}")
        tokens = top_quartile_tokens(heatmaps_by_branch[branch_id])
        lines.append(f"{branch_id}.top_tokens={','.join(str(t) for t in tokens)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def heatmap_path(out_dir: str, branch_id: str) -> str:
    return os.path.join(out_dir, f"gates_{branch_id}.csv")
