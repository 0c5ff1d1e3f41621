"""Collapse and condition-adherence measurements.

Diversity and repetition are measured with root-mean-square pixel distance
between whole images. Adherence classifies the two 28x28 halves of each
generated image with a separately trained digit classifier (the "oracle")
and compares the unordered pair of predictions to the requested classes.
"""

from __future__ import annotations

import bisect
import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.distance import pdist, squareform
from torch import nn

from . import checkpoint as ckpt
from .conditioning import condition_classes
from .dataset import DIGIT_SIZE, to_unit_range

ORACLE_MIN_ACCURACY = 0.98


class OracleAccuracyError(RuntimeError):
    """The oracle classifier is not accurate enough to be used as a measurement."""


def _flatten(batch) -> np.ndarray:
    if isinstance(batch, torch.Tensor):
        batch = batch.detach().numpy()
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] < 2:
        raise ValueError(f"need at least 2 images, got {batch.shape[0]}")
    return batch.reshape(batch.shape[0], -1)


def rms_distances(batch) -> np.ndarray:
    """Condensed pairwise RMS pixel distances (``scipy.spatial.distance.pdist`` order)."""
    flat = _flatten(batch)
    return pdist(flat, metric="euclidean") / math.sqrt(flat.shape[1])


def diversity_score(batch) -> float:
    """Mean RMS pixel distance over all unordered pairs."""
    return float(np.mean(rms_distances(batch)))


def nearest_neighbor_distances(batch) -> np.ndarray:
    d = squareform(rms_distances(batch))
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1)


def near_duplicate_rate(samples, threshold: float) -> float:
    """Fraction of samples whose nearest other sample lies strictly below ``threshold``."""
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    return float(np.mean(nearest_neighbor_distances(samples) < threshold))


def calibrate_duplicate_threshold(real_sets: Sequence, target_rate: float = 0.01) -> float:
    """Largest threshold at which every set of real images scores below ``target_rate``.

    Each set should have the size the generated set will be evaluated at,
    since nearest-neighbour distances shrink as sets grow.
    """
    thresholds = []
    for images in real_sets:
        nn_d = np.sort(nearest_neighbor_distances(images))
        # allowed = most samples that may fall strictly below the threshold
        allowed = math.ceil(target_rate * len(nn_d)) - 1
        thresholds.append(nn_d[allowed])
    threshold = float(min(thresholds))
    if not threshold > 0:
        raise ValueError("real images contain exact duplicates; cannot calibrate a positive threshold")
    return threshold


# --- oracle classifier -----------------------------------------------------


class DigitClassifier(nn.Module):
    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 16, 5, padding=2),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 5, padding=2),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        self.classifier = nn.Sequential(nn.Linear(32 * 7 * 7, 128), nn.ReLU(), nn.Linear(128, 10))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x).flatten(1))


@dataclass
class EvalClassifier:
    model: DigitClassifier
    test_accuracy: float

    def usable(self) -> bool:
        return self.test_accuracy >= ORACLE_MIN_ACCURACY

    def predict(self, digits, batch_size: int = 1000) -> np.ndarray:
        """Labels for ``N x 1 x 28 x 28`` images in [-1, 1]."""
        digits = torch.as_tensor(np.asarray(digits, dtype=np.float32))
        self.model.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(digits), batch_size):
                out.append(self.model(digits[i : i + batch_size]).argmax(1).numpy())
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train_eval_classifier(
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    seed: int = 0,
    epochs: int = 3,
    batch_size: int = 128,
    lr: float = 1e-3,
    min_accuracy: float = ORACLE_MIN_ACCURACY,
) -> EvalClassifier:
    """Fit the digit oracle on uint8 MNIST; raise if held-out accuracy < ``min_accuracy``."""
    if len(train_images) == 0:
        raise ValueError("empty training set")
    if len(train_images) != len(train_labels):
        raise ValueError("train images and labels differ in length")
    gen = torch.Generator().manual_seed(seed)
    model = DigitClassifier()
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=gen)
            nn.init.zeros_(m.bias)
    x = torch.from_numpy(to_unit_range(train_images)[:, None])
    y = torch.from_numpy(np.asarray(train_labels, dtype=np.int64))
    opt = torch.optim.Adam(model.parameters(), lr=lr, foreach=False)
    model.train()
    for _ in range(epochs):
        order = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), batch_size):
            idx = order[i : i + batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    oracle = EvalClassifier(model, 0.0)
    preds = oracle.predict(to_unit_range(test_images)[:, None])
    oracle.test_accuracy = float(np.mean(preds == np.asarray(test_labels)))
    if oracle.test_accuracy < min_accuracy:
        raise OracleAccuracyError(f"oracle reached {oracle.test_accuracy:.4f} held-out accuracy, need {min_accuracy}")
    return oracle


def save_oracle(oracle: EvalClassifier, path) -> None:
    tensors = {k: v.detach().numpy().copy() for k, v in oracle.model.state_dict().items()}
    ckpt.write_container(path, {"kind": "oracle", "test_accuracy": oracle.test_accuracy}, tensors)


def load_oracle(path) -> EvalClassifier:
    meta, tensors = ckpt.read_container(path)
    if meta.get("kind") != "oracle":
        raise ckpt.CheckpointCompatibilityError(f"{os.fspath(path)}: not an oracle file (kind={meta.get('kind')!r})")
    model = DigitClassifier()
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    return EvalClassifier(model, float(meta["test_accuracy"]))


def split_halves(images) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(images, torch.Tensor):
        images = images.detach().numpy()
    images = np.asarray(images, dtype=np.float32)
    return images[..., :DIGIT_SIZE], images[..., DIGIT_SIZE : 2 * DIGIT_SIZE]


def adherence_mask(images, conditions, oracle: EvalClassifier) -> np.ndarray:
    """Per-sample flag: predicted {left, right} equals the condition's class set."""
    conditions = np.asarray(conditions)
    wanted = [condition_classes(c) for c in conditions]
    for i, w in enumerate(wanted):
        if len(w) != 2:
            raise ValueError(f"condition {i} has {len(w)} classes; adherence is defined for pairs only")
    left, right = split_halves(images)
    pl, pr = oracle.predict(left), oracle.predict(right)
    return np.array([frozenset((int(a), int(b))) == w for a, b, w in zip(pl, pr, wanted)])


def condition_adherence(images, conditions, oracle: EvalClassifier) -> float:
    if not oracle.usable():
        raise OracleAccuracyError(f"oracle accuracy {oracle.test_accuracy:.4f} < {ORACLE_MIN_ACCURACY}")
    return float(np.mean(adherence_mask(images, conditions, oracle)))


# --- report ----------------------------------------------------------------


@dataclass
class DiagnosticsReport:
    diversity: float
    duplicate_rate: float
    adherence: float
    n_samples: int
    duplicate_threshold: float = float("nan")
    oracle_accuracy: float = float("nan")

    def __post_init__(self):
        if not self.diversity >= 0:
            raise ValueError(f"diversity must be >= 0, got {self.diversity}")
        for name in ("duplicate_rate", "adherence"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def to_kv(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in dataclasses.asdict(self).items())

    def to_text(self) -> str:
        return (
            "Diagnostics report\n"
            f"  samples             {self.n_samples}\n"
            f"  diversity (RMS)     {self.diversity:.4f}\n"
            f"  near-duplicate rate {self.duplicate_rate:.4f}  (threshold {self.duplicate_threshold:.4f})\n"
            f"  condition adherence {self.adherence:.4f}  (oracle accuracy {self.oracle_accuracy:.4f})\n"
        )


def build_report(images, conditions, oracle: EvalClassifier, threshold: float) -> DiagnosticsReport:
    return DiagnosticsReport(
        diversity=diversity_score(images),
        duplicate_rate=near_duplicate_rate(images, threshold),
        adherence=condition_adherence(images, conditions, oracle),
        n_samples=len(conditions),
        duplicate_threshold=threshold,
        oracle_accuracy=oracle.test_accuracy,
    )


# --- telemetry analysis ----------------------------------------------------


@dataclass
class SeriesStats:
    min: float
    max: float
    mean: float


@dataclass
class TelemetrySummary:
    steps: int = 0
    alpha_by_epoch: list[SeriesStats] = field(default_factory=list)
    beta_by_epoch: list[SeriesStats] = field(default_factory=list)
    flagged_steps: list[int] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"steps {self.steps}", f"flagged beta spikes {len(self.flagged_steps)}: {self.flagged_steps}"]
        for e, (a, b) in enumerate(zip(self.alpha_by_epoch, self.beta_by_epoch)):
            lines.append(
                f"epoch {e}: alpha min {a.min:.4f} max {a.max:.4f} mean {a.mean:.4f} | "
                f"beta min {b.min:.4f} max {b.max:.4f} mean {b.mean:.4f}"
            )
        return "\n".join(lines) + "\n"


def _stats(values: np.ndarray) -> SeriesStats:
    return SeriesStats(float(values.min()), float(values.max()), float(values.mean()))


def analyze_telemetry(records, steps_per_epoch: int | None = None, spike_multiple: float = 5.0) -> TelemetrySummary:
    """Per-epoch alpha/beta statistics plus beta spikes.

    A step is flagged when ``|mean_beta|`` exceeds ``spike_multiple`` times the
    median of ``|mean_beta|`` over all earlier steps. ``records`` is a list of
    :class:`~crgan.training.StepTelemetry` or a telemetry file path.
    """
    if isinstance(records, (str, os.PathLike)):
        from .training import read_telemetry

        records = read_telemetry(records)
    if not records:
        return TelemetrySummary()
    alpha = np.array([r.mean_alpha for r in records])
    beta = np.array([r.mean_beta for r in records])
    spe = steps_per_epoch or len(records)
    summary = TelemetrySummary(steps=len(records))
    for start in range(0, len(records), spe):
        summary.alpha_by_epoch.append(_stats(alpha[start : start + spe]))
        summary.beta_by_epoch.append(_stats(beta[start : start + spe]))
    history: list[float] = []
    for rec, b in zip(records, np.abs(beta)):
        if history:
            n = len(history)
            median = history[n // 2] if n % 2 else 0.5 * (history[n // 2 - 1] + history[n // 2])
            if b > spike_multiple * median:
                summary.flagged_steps.append(rec.step)
        bisect.insort(history, float(b))
    return summary
