"""Deterministic synthetic two-factor data for the toy conditional pipeline.

Each sample is a 2-D point drawn around a ring-grid cell mean: the text factor
picks the angle, the extra-modality factor picks the radius. Condition streams
are fixed random-orthogonal class codes, so all adaptation has to happen in the
connector, never in the features.
"""

import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from .numerics import RngState

FACTOR_ANGLE = "angle"
FACTOR_RADIUS = "radius"
TEXT_MODE_CLASS = "class"
TEXT_MODE_NEUTRAL = "neutral"


class DatasetError(ValueError):
    """Invalid task specification or mask."""


@dataclass(frozen=True)
class TaskSpec:
    n_text_classes: int = 4
    n_modal_classes: int = 4
    samples_per_cell: int = 64
    noise_sigma: float = 0.15
    seed: int = 0
    d_text: int = 12
    d_modal: int = 8
    tokens_per_stream: int = 4
    # Which geometry factor the extra-modality stream encodes, and whether the
    # text stream carries the angle class or a single neutral prompt code.
    modal_factor: str = FACTOR_RADIUS
    text_mode: str = TEXT_MODE_CLASS
    radius_base: float = 1.0
    radius_step: float = 1.0

    def validate(self) -> None:
        if self.n_text_classes < 2 or self.n_modal_classes < 2:
            raise DatasetError("need at least 2 classes per factor")
        if self.samples_per_cell < 1:
            raise DatasetError("samples_per_cell must be positive")
        if self.noise_sigma <= 0:
            raise DatasetError("noise_sigma must be positive")
        if self.modal_factor not in (FACTOR_ANGLE, FACTOR_RADIUS):
            raise DatasetError(f"unknown modal_factor {self.modal_factor!r}")
        if self.text_mode not in (TEXT_MODE_CLASS, TEXT_MODE_NEUTRAL):
            raise DatasetError(f"unknown text_mode {self.text_mode!r}")
        if self.tokens_per_stream < 1 or self.d_text < 2 or self.d_modal < 2:
            raise DatasetError("stream shape fields must be positive (d >= 2)")

    def n_classes(self, factor: str) -> int:
        return self.n_text_classes if factor == FACTOR_ANGLE else self.n_modal_classes


@dataclass
class Sample:
    x: np.ndarray  # (2,)
    text_label: int  # angle class
    modal_label: int  # radius class
    text_tokens: np.ndarray  # (tokens_per_stream, d_text)
    modal_tokens: np.ndarray  # (tokens_per_stream, d_modal)
    mask: np.ndarray | None = None  # per-dimension loss weights
    dropped: bool = False  # condition dropout marker, consumed by the trainer


@dataclass
class Codebooks:
    """Fixed random-orthogonal class codes; pure function of the task seed."""

    text: np.ndarray  # (n_text_classes, n_tok, d_text)
    neutral_text: np.ndarray  # (n_tok, d_text)
    angle_modal: np.ndarray  # (n_text_classes, n_tok, d_modal)
    radius_modal: np.ndarray  # (n_modal_classes, n_tok, d_modal)

    def modal(self, factor: str) -> np.ndarray:
        return self.angle_modal if factor == FACTOR_ANGLE else self.radius_modal


def _orthogonal_codes(rng: RngState, n_classes: int, n_tok: int, d: int) -> np.ndarray:
    """n_classes codes of shape (n_tok, d), orthonormal when flattened, unit RMS."""
    flat_dim = n_tok * d
    if n_classes > flat_dim:
        raise DatasetError("more classes than flattened stream dimensions")
    raw = rng.normal((flat_dim, n_classes))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity for determinism
    codes = q.T * np.sqrt(flat_dim)  # unit per-entry RMS
    return codes.reshape(n_classes, n_tok, d)


def build_codebooks(spec: TaskSpec) -> Codebooks:
    spec.validate()
    rng = RngState(spec.seed).split("codebooks")
    text = _orthogonal_codes(rng, spec.n_text_classes + 1, spec.tokens_per_stream, spec.d_text)
    angle = _orthogonal_codes(rng, spec.n_text_classes, spec.tokens_per_stream, spec.d_modal)
    radius = _orthogonal_codes(rng, spec.n_modal_classes, spec.tokens_per_stream, spec.d_modal)
    return Codebooks(
        text=text[: spec.n_text_classes],
        neutral_text=text[spec.n_text_classes],
        angle_modal=angle,
        radius_modal=radius,
    )


def cell_mean(spec: TaskSpec, text_label: int, modal_label: int) -> np.ndarray:
    """Ground-truth mean of cell (angle class, radius class)."""
    theta = 2.0 * np.pi * text_label / spec.n_text_classes
    r = spec.radius_base + spec.radius_step * modal_label
    return r * np.array([np.cos(theta), np.sin(theta)])


def all_cell_means(spec: TaskSpec) -> np.ndarray:
    """(n_text_classes, n_modal_classes, 2) grid of cell means."""
    grid = np.zeros((spec.n_text_classes, spec.n_modal_classes, 2))
    for i in range(spec.n_text_classes):
        for j in range(spec.n_modal_classes):
            grid[i, j] = cell_mean(spec, i, j)
    return grid


def gen_dataset(spec: TaskSpec) -> list[Sample]:
    """Full factorial dataset; a pure function of the TaskSpec."""
    spec.validate()
    books = build_codebooks(spec)
    rng = RngState(spec.seed).split("points")
    samples: list[Sample] = []
    for i in range(spec.n_text_classes):
        text_tokens = books.neutral_text if spec.text_mode == TEXT_MODE_NEUTRAL else books.text[i]
        for j in range(spec.n_modal_classes):
            mean = cell_mean(spec, i, j)
            modal_idx = i if spec.modal_factor == FACTOR_ANGLE else j
            modal_tokens = books.modal(spec.modal_factor)[modal_idx]
            points = mean + spec.noise_sigma * rng.normal((spec.samples_per_cell, 2))
            for row in points:
                samples.append(
                    Sample(
                        x=row,
                        text_label=i,
                        modal_label=j,
                        text_tokens=text_tokens,
                        modal_tokens=modal_tokens,
                    )
                )
    return samples


def condition_dropout(batch: list[Sample], p_drop: float, rng: RngState) -> list[Sample]:
    """Independently mark samples whose streams the trainer swaps for learned nulls."""
    if not 0.0 <= p_drop < 1.0:
        raise DatasetError("p_drop must lie in [0, 1)")
    if p_drop == 0.0:
        return list(batch)
    flags = rng.bernoulli(p_drop, (len(batch),))
    return [replace(s, dropped=bool(f) or s.dropped) for s, f in zip(batch, flags)]


def apply_object_mask(sample: Sample, mask_spec) -> Sample:
    """Attach per-dimension loss weights (the subject-over-background weighting)."""
    mask = np.asarray(mask_spec, dtype=np.float64)
    if mask.shape != sample.x.shape:
        raise DatasetError(f"mask shape {mask.shape} does not match sample shape {sample.x.shape}")
    if np.any(mask < 0):
        raise DatasetError("mask weights must be non-negative")
    return replace(sample, mask=mask)


# ---------------------------------------------------------------------------
# dump / load (same CSV dialect as generated-sample dumps)
# ---------------------------------------------------------------------------


def format_float(x: float) -> str:
    """Fixed 9-significant-digit decimal formatting used by every CSV we write."""
    return f"{x:.9g}"


def dump_dataset(samples: list[Sample], spec: TaskSpec, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "dim0", "dim1", "condition_label"])
        for idx, s in enumerate(samples):
            writer.writerow(
                [idx, format_float(s.x[0]), format_float(s.x[1]), f"{s.text_label}:{s.modal_label}"]
            )
    with open(_sidecar_path(path), "w") as fh:
        json.dump(spec.__dict__, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(path: str) -> tuple[list[Sample], TaskSpec]:
    with open(_sidecar_path(path)) as fh:
        spec = TaskSpec(**json.load(fh))
    books = build_codebooks(spec)
    samples: list[Sample] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["sample_id", "dim0", "dim1", "condition_label"]:
            raise DatasetError(f"unexpected dataset header: {header}")
        for row in reader:
            i, j = (int(v) for v in row[3].split(":"))
            text_tokens = books.neutral_text if spec.text_mode == TEXT_MODE_NEUTRAL else books.text[i]
            modal_idx = i if spec.modal_factor == FACTOR_ANGLE else j
            samples.append(
                Sample(
                    x=np.array([float(row[1]), float(row[2])]),
                    text_label=i,
                    modal_label=j,
                    text_tokens=text_tokens,
                    modal_tokens=books.modal(spec.modal_factor)[modal_idx],
                )
            )
    return samples, spec


def _sidecar_path(path: str) -> str:
    return path + ".spec.json"
