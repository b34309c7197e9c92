"""Synthetic 2-D, 2-class domains that differ by a rotation about the origin.

A source domain sits at 0 degrees and targets at other angles, which gives a
tunable amount of domain shift.  Everything is reproducible from the seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nnet import Batch

BASE_TASKS = ("two-gaussians", "two-moons")


class DomainSpecError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    base_task: str = "two-moons"
    rotation_deg: float = 0.0
    noise_std: float = 0.15
    n_train: int = 512
    n_test: int = 1024
    seed: int = 0

    def validate(self) -> None:
        if self.base_task not in BASE_TASKS:
            raise DomainSpecError(f"base_task must be one of {BASE_TASKS}, got {self.base_task!r}")
        if not (0.0 <= self.noise_std < 2.0):
            raise DomainSpecError(f"noise_std must be in [0, 2), got {self.noise_std}")
        if self.n_train < 8 or self.n_test < 8:
            raise DomainSpecError("n_train and n_test must be >= 8")
        if not math.isfinite(self.rotation_deg):
            raise DomainSpecError("rotation_deg must be finite")


@dataclass
class Dataset:
    train: Batch
    test: Batch
    spec: DomainSpec


def rotation_matrix(deg: float) -> np.ndarray:
    deg = math.fmod(deg, 360.0)
    if deg == 0.0:
        return np.eye(2)
    rad = math.radians(deg)
    c, s = math.cos(rad), math.sin(rad)
    return np.array([[c, -s], [s, c]])


def rotate(points: np.ndarray, deg: float) -> np.ndarray:
    """Rotate row vectors counter-clockwise by ``deg`` about the origin."""
    return points @ rotation_matrix(deg).T


def _clean_points(task: str, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = labels.size
    if task == "two-gaussians":
        x = np.where(labels == 0, -1.0, 1.0)
        return np.column_stack([x, np.zeros(n)])
    # two interleaved half circles, centred on the origin
    t = rng.uniform(0.0, math.pi, size=n)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    pts = np.where(labels[:, None] == 0, upper, lower)
    return pts - np.array([0.5, 0.25])


def _draw(task: str, n: int, noise_std: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = rng.permutation(np.arange(n) % 2)
    pts = _clean_points(task, labels, rng)
    pts = pts + rng.normal(0.0, 1.0, size=pts.shape) * noise_std
    return pts, labels


def make_domain(spec: DomainSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    x_tr, y_tr = _draw(spec.base_task, spec.n_train, spec.noise_std, rng)
    x_te, y_te = _draw(spec.base_task, spec.n_test, spec.noise_std, rng)
    return Dataset(
        Batch(rotate(x_tr, spec.rotation_deg), y_tr),
        Batch(rotate(x_te, spec.rotation_deg), y_te),
        spec,
    )


def write_csv(batch: Batch, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x0", "x1", "label"])
        for (x0, x1), y in zip(batch.inputs, batch.labels):
            w.writerow([repr(float(x0)), repr(float(x1)), int(y)])


def read_csv(path: str | Path) -> Batch:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    x = np.array([[float(r["x0"]), float(r["x1"])] for r in rows])
    y = np.array([int(r["label"]) for r in rows])
    return Batch(x, y)
