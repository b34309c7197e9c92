"""Merge-friendly post-training quantization by layer-wise reconstruction.

Three methods share one reconstruction loop:

``hdrq``
    Weights are trained as ``w + eps`` with ``eps ~ U[-step/2, step/2]`` for
    most of the budget, then with hard fake quantization (straight-through)
    for the tail.  A penalty ``lambda * ||w - w_src||^2`` keeps the weights
    near the shared source model, and activations are fake-quantized with a
    per-layer coin (kept full precision with probability ``drop_prob``).
``recon_only``
    Fake quantization with straight-through gradients for the whole budget,
    activations always quantized, no distance penalty.
``recon_drop``
    As ``recon_only`` but with the activation drop coin.

Each layer is one block.  Blocks are reconstructed in order; the iteration
budget is split evenly between them and every block gets its own warmup /
cosine schedule and noise-then-fake-quant phases.  Earlier blocks are frozen
at their hard-quantized weights, later blocks stay at full precision.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import QuantizedCheckpoint, act_hook
from .nnet import (Batch, CrossEntropy, DimensionError, Network, Objective, OptimState,
                   adam_step, check_same_architecture, cross_entropy, forward, lr_schedule)
from .quant import (QuantScheme, calibrate_activation, calibrate_step, fake_quant,
                    quantize_uniform, sample_noise, ste_mask)

METHODS = ("hdrq", "recon_only", "recon_drop")
FULL_ITERATIONS = 20000
FULL_TAIL = 3500


@dataclass(frozen=True)
class PtqConfig:
    weight_bits: int = 4
    act_bits: int = 8
    iterations: int = FULL_ITERATIONS
    fake_quant_tail: int = FULL_TAIL
    scale: float = 0.05
    lambda_dist: float = 5e-2
    squared_distance: bool = True
    lr0: float = 1e-3
    warmup: int | None = None
    drop_prob: float = 0.5
    calib_batches: int = 4
    recalib_every: int = 500
    seed: int = 0
    method: str = "hdrq"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 < self.fake_quant_tail < self.iterations:
            raise ValueError("need 0 < fake_quant_tail < iterations")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must be in [0, 1]")
        if self.lambda_dist < 0:
            raise ValueError("lambda_dist must be >= 0")
        if not 0 < self.scale <= 1:
            raise ValueError("scale must be in (0, 1]")
        if self.n_tail >= self.n_iterations:
            raise ValueError("scaled fake_quant_tail must stay below scaled iterations")

    @property
    def n_iterations(self) -> int:
        return max(2, round(self.iterations * self.scale))

    @property
    def n_tail(self) -> int:
        return max(1, round(self.fake_quant_tail * self.scale))

    @property
    def quantize_acts(self) -> bool:
        return self.act_bits <= 8

    def effective(self) -> "PtqConfig":
        """The config with method-implied overrides applied."""
        if self.method == "recon_only":
            return replace(self, lambda_dist=0.0, drop_prob=0.0)
        if self.method == "recon_drop":
            return replace(self, lambda_dist=0.0)
        return self


@dataclass
class PtqResult:
    quantized: QuantizedCheckpoint
    loss_trace: np.ndarray
    lr_trace: np.ndarray
    phase_trace: list[str]
    distance_to_source: float
    final_loss: float
    config: PtqConfig = field(repr=False, default=None)

    def network(self) -> Network:
        return self.quantized.to_network()

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "loss", "lr", "phase"])
            for i, (loss, lr, ph) in enumerate(zip(self.loss_trace, self.lr_trace, self.phase_trace)):
                w.writerow([i, repr(float(loss)), repr(float(lr)), ph])


def distance_penalty(net: Network, source: Network) -> float:
    """Squared l2 distance summed over every weight and bias tensor."""
    check_same_architecture(net, source)
    return float(sum(np.sum((a - b) ** 2) for a, b in zip(net.params(), source.params())))


def _block_sizes(total: int, n_blocks: int) -> list[int]:
    base = total // n_blocks
    sizes = [base] * n_blocks
    sizes[-1] += total - base * n_blocks
    return sizes


def reconstruct(net: Network, source: Network, calib: list[Batch], cfg: PtqConfig) -> PtqResult:
    """Quantize ``net`` (adapted from ``source``) using the calibration batches."""
    check_same_architecture(net, source)
    calib = list(calib)
    if not calib:
        raise ValueError("empty calibration stream")
    if calib[0].inputs.shape[1] != net.layers[0].in_dim:
        raise DimensionError("calibration inputs do not match the network input dimension")
    eff = cfg.effective()
    rng = np.random.default_rng(cfg.seed)
    n_layers = len(net.layers)
    total, tail = cfg.n_iterations, cfg.n_tail
    if total < n_layers * 2:
        raise ValueError("iteration budget too small for the number of blocks")

    act_schemes = _calibrate_acts(net, calib[:max(1, cfg.calib_batches)], cfg)
    src_params = source.params()
    params = [p.copy() for p in net.params()]
    steps: list[QuantScheme | None] = [None] * n_layers
    frozen = [False] * n_layers

    loss_trace, lr_trace, phases = [], [], []
    t_global = 0
    for k, seg in enumerate(_block_sizes(total, n_layers)):
        seg_tail = min(seg - 1, max(1, round(tail * seg / total)))
        warmup = eff.warmup if eff.warmup is not None else int(0.05 * seg)
        warmup = min(warmup, seg - 1)
        idx = [2 * k, 2 * k + 1]
        state = OptimState.zeros_like([params[i] for i in idx])
        for t in range(seg):
            if t % cfg.recalib_every == 0:
                steps[k] = calibrate_step(params[2 * k], cfg.weight_bits)
            noise_phase = eff.method == "hdrq" and t < seg - seg_tail
            lr = lr_schedule(t, seg, warmup, eff.lr0)
            batch = calib[t_global % len(calib)]

            w = params[2 * k]
            if noise_phase:
                w_used = w + sample_noise(steps[k], w.shape, rng)
                w_mask = None
            else:
                w_used = fake_quant(w, steps[k])
                w_mask = ste_mask(w, steps[k])
            run = list(params)
            for j in range(n_layers):
                if frozen[j]:
                    run[2 * j] = fake_quant(params[2 * j], steps[j])
            run[2 * k] = w_used

            keep_fp = None
            if eff.drop_prob > 0:
                keep_fp = list(rng.random(n_layers) < eff.drop_prob)
            hook = act_hook(act_schemes, keep_fp)
            task, grads = CrossEntropy(hook).value_and_grad(net.with_params(run), batch)
            gw, gb = grads[2 * k], grads[2 * k + 1]
            if w_mask is not None:
                gw = gw * w_mask

            reg = 0.0
            if eff.lambda_dist > 0:
                dw = params[2 * k] - src_params[2 * k]
                db = params[2 * k + 1] - src_params[2 * k + 1]
                sq = float(np.sum(dw * dw) + np.sum(db * db))
                if eff.squared_distance:
                    reg = eff.lambda_dist * sq
                    gw = gw + 2 * eff.lambda_dist * dw
                    gb = gb + 2 * eff.lambda_dist * db
                elif sq > 0:
                    norm = math.sqrt(sq)
                    reg = eff.lambda_dist * norm
                    gw = gw + eff.lambda_dist * dw / norm
                    gb = gb + eff.lambda_dist * db / norm

            new, state = adam_step([params[i] for i in idx], [gw, gb], state, lr)
            params[2 * k], params[2 * k + 1] = new
            loss_trace.append(task + reg)
            lr_trace.append(lr)
            phases.append("noise" if noise_phase else "fake_quant")
            t_global += 1
        frozen[k] = True

    qweights = [quantize_uniform(params[2 * k], steps[k]) for k in range(n_layers)]
    biases = [params[2 * k + 1].copy() for k in range(n_layers)]
    ck = QuantizedCheckpoint(qweights, biases, act_schemes)
    qnet = ck.to_network()
    final_loss = evaluate_loss(ck, calib)
    return PtqResult(
        quantized=ck,
        loss_trace=np.asarray(loss_trace),
        lr_trace=np.asarray(lr_trace),
        phase_trace=phases,
        distance_to_source=math.sqrt(distance_penalty(qnet, source)),
        final_loss=final_loss,
        config=cfg,
    )


def _calibrate_acts(net: Network, batches: list[Batch], cfg: PtqConfig) -> list[QuantScheme | None]:
    if not cfg.quantize_acts:
        return [None] * len(net.layers)
    per_layer: list[list[np.ndarray]] = [[] for _ in net.layers]

    def record(k, x):
        per_layer[k].append(x)
        return x, None

    for b in batches:
        forward(net, b.inputs, record)
    return [calibrate_activation(xs, cfg.act_bits) for xs in per_layer]


def evaluate_loss(ck: QuantizedCheckpoint, batches: list[Batch]) -> float:
    """Cross-entropy of a checkpoint (with its activation quantizers) over batches."""
    x = np.concatenate([b.inputs for b in batches])
    y = np.concatenate([b.labels for b in batches])
    return cross_entropy(forward(ck.to_network(), x, ck.act_hook()), y)


def noise_loss_gap(net: Network, schemes: list[QuantScheme | None], batch: Batch | None,
                   n_samples: int, rng: np.random.Generator, loss: Objective | None = None,
                   antithetic: bool = False) -> tuple[float, float]:
    """Monte-Carlo estimate of ``E[L(w + eps)] - L(w)`` and its standard error.

    ``eps`` is uniform on each layer's weight tensor with that layer's step;
    layers whose scheme is ``None`` and all biases are left untouched.  With
    ``antithetic`` each draw is paired with its negation, which cancels the
    first-order term sample by sample.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    if len(schemes) != len(net.layers):
        raise DimensionError("one scheme (or None) per layer required")
    loss = loss or CrossEntropy()
    base = loss(net, batch)
    params = net.params()
    diffs = np.empty(n_samples)
    for i in range(n_samples):
        eps = [sample_noise(s, params[2 * k].shape, rng) if s is not None else None
               for k, s in enumerate(schemes)]
        diffs[i] = _perturbed(net, params, eps, 1.0, loss, batch) - base
        if antithetic:
            down = _perturbed(net, params, eps, -1.0, loss, batch) - base
            diffs[i] = 0.5 * (diffs[i] + down)
    return float(diffs.mean()), float(diffs.std(ddof=1) / math.sqrt(n_samples))


def _perturbed(net, params, eps, sign, loss, batch):
    p = list(params)
    for k, e in enumerate(eps):
        if e is not None:
            p[2 * k] = params[2 * k] + sign * e
    return loss(net.with_params(p), batch)
