"""Per-tensor symmetric uniform quantization.

``w_hat = clamp(round(w / step), -2**(b-1), 2**(b-1) - 1) * step`` with
round-half-away-from-zero.  No zero point.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

CALIB_GRID = np.linspace(0.5, 1.2, 100)


class CalibrationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class QuantScheme:
    bits: int
    step: float
    target: str = "weight"

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if not (self.step > 0 and np.isfinite(self.step)):
            raise ValueError(f"step must be positive and finite, got {self.step}")
        if self.target not in ("weight", "activation"):
            raise ValueError(f"unknown quantization target {self.target!r}")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


@dataclass
class QuantizedTensor:
    ints: np.ndarray
    scheme: QuantScheme

    def __post_init__(self):
        self.ints = np.asarray(self.ints, dtype=np.int64)
        if self.ints.size and (self.ints.min() < self.scheme.qmin or self.ints.max() > self.scheme.qmax):
            raise ValueError("integer payload outside the scheme's range")

    @property
    def shape(self):
        return self.ints.shape


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_ints(w: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize non-finite values")
    return np.clip(round_half_away(w / scheme.step), scheme.qmin, scheme.qmax).astype(np.int64)


def quantize_uniform(w: np.ndarray, scheme: QuantScheme) -> QuantizedTensor:
    return QuantizedTensor(quantize_ints(w, scheme), scheme)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.ints.astype(np.float64) * q.scheme.step


def fake_quant(w: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    return quantize_ints(w, scheme).astype(np.float64) * scheme.step


def calibrate_step(w: np.ndarray, bits: int, target: str = "weight") -> QuantScheme:
    """Step minimising quantization MSE over a 100-point grid around max|w|/qmax.

    Ties go to the smallest step.  An all-zero tensor gets step 1.0 and a
    :class:`CalibrationWarning`.
    """
    w = np.asarray(w, dtype=np.float64)
    qmax = 2 ** (bits - 1) - 1
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    if amax == 0.0:
        warnings.warn("all-zero tensor: step set to the 1.0 sentinel", CalibrationWarning, stacklevel=2)
        return QuantScheme(bits, 1.0, target)
    steps = CALIB_GRID * (amax / qmax)
    flat = w.ravel()
    ints = np.clip(round_half_away(flat[None, :] / steps[:, None]), -qmax - 1, qmax)
    mse = np.mean((ints * steps[:, None] - flat[None, :]) ** 2, axis=1)
    return QuantScheme(bits, float(steps[int(np.argmin(mse))]), target)


def calibrate_activation(samples: list[np.ndarray], bits: int) -> QuantScheme:
    """Min-max (max-abs) step from a list of activation batches."""
    amax = max(float(np.max(np.abs(a))) for a in samples)
    if amax == 0.0:
        amax = 1.0
    return QuantScheme(bits, amax / (2 ** (bits - 1) - 1), "activation")


def sample_noise(scheme: QuantScheme, shape, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. uniform noise on [-step/2, step/2]."""
    half = scheme.step / 2.0
    return rng.uniform(-half, half, size=shape)


def ste_mask(a: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Straight-through mask: 1 where ``a / step`` lies inside the clamp range."""
    r = np.asarray(a) / scheme.step
    return ((r >= scheme.qmin) & (r <= scheme.qmax)).astype(np.float64)


def fake_quant_act(a: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Quantize-dequantize activations.  Use :func:`ste_mask` for the backward pass."""
    if scheme.target != "activation":
        raise ValueError("fake_quant_act needs an activation scheme")
    return fake_quant(a, scheme)
