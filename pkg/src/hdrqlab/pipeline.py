"""End-to-end desk experiments: train source, adapt per target, quantize, merge.

Every stage draws its randomness from ``derive_seed(master, stage, domain)``
so stages can be rerun independently without changing each other's streams.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .checkpoint import QuantizedCheckpoint, act_hook
from .config import ExperimentConfig
from .hdrq import PtqResult, distance_penalty, reconstruct
from .merge import (evaluate_checkpoint, harmonic_mean, merge_noise_sampled, random_single_sample,
                    run_merge, _safe_hmean, _merge_acts)
from .nnet import Batch, CrossEntropy, Network, accuracy, train
from .synthdata import Dataset, DomainSpec, make_domain

log = logging.getLogger(__name__)


def derive_seed(master: int, stage: str, domain: str = "") -> int:
    digest = hashlib.blake2b(f"{master}/{stage}/{domain}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


def domain_id(rotation: float) -> str:
    return f"rot{rotation:g}"


def make_dataset(cfg: ExperimentConfig, rotation: float, master_seed: int) -> Dataset:
    d = cfg.data
    spec = DomainSpec(d.base_task, float(rotation), d.noise_std, d.n_train, d.n_test,
                      derive_seed(master_seed, "data", domain_id(rotation)))
    return make_domain(spec)


def train_source(cfg: ExperimentConfig, master_seed: int) -> tuple[Network, Dataset]:
    data = make_dataset(cfg, cfg.data.source_rotation, master_seed)
    rng = np.random.default_rng(derive_seed(master_seed, "train", "source"))
    sizes = [2, *cfg.train.hidden, 2]
    net = Network.init(sizes, rng)
    net, _ = train(net, data.train, epochs=cfg.train.epochs, lr=cfg.train.lr,
                   batch_size=cfg.train.batch_size, rng=rng, warmup_frac=0.05)
    return net, data


def adapt(source: Network, cfg: ExperimentConfig, rotation: float, master_seed: int) -> tuple[Network, Dataset]:
    """Fine-tune the source model on one target domain (supervised proxy for adaptation)."""
    data = make_dataset(cfg, rotation, master_seed)
    rng = np.random.default_rng(derive_seed(master_seed, "adapt", domain_id(rotation)))
    net, _ = train(source.copy(), data.train, epochs=cfg.train.adapt_epochs, lr=cfg.train.adapt_lr,
                   batch_size=cfg.train.batch_size, rng=rng, warmup_frac=0.05)
    return net, data


def calibration_stream(data: Dataset, cfg: ExperimentConfig) -> list[Batch]:
    return data.train.split(cfg.ptq.calib_batch_size)


def quantize(adapted: Network, source: Network, data: Dataset, cfg: ExperimentConfig,
             master_seed: int, **overrides) -> PtqResult:
    ptq = cfg.ptq.ptq_config(derive_seed(master_seed, "ptq", domain_id(data.spec.rotation_deg)), **overrides)
    return reconstruct(adapted, source, calibration_stream(data, cfg), ptq)


def checkpoint_accuracy(ck: QuantizedCheckpoint, batch: Batch) -> float:
    return accuracy(ck.to_network(), batch, ck.act_hook())


def path_barrier(cks: list[QuantizedCheckpoint], tests: list[Batch], grid_n: int) -> float:
    """Mean over domains of the error barrier between two quantized models.

    The path is evaluated with the averaged activation quantizers, matching
    what a merged model would run with.
    """
    loss = CrossEntropy(act_hook(_merge_acts(cks)))
    a, b = cks[0].to_network(), cks[1].to_network()
    return float(np.mean([analysis.error_barrier(a, b, t, grid_n, loss).barrier for t in tests]))


@dataclass
class AdaptedModels:
    source: Network
    source_data: Dataset
    targets: list[Network]
    target_data: list[Dataset]

    @property
    def test_batches(self) -> dict[str, Batch]:
        return {domain_id(d.spec.rotation_deg): d.test for d in self.target_data}


def prepare(cfg: ExperimentConfig, master_seed: int) -> AdaptedModels:
    source, sdata = train_source(cfg, master_seed)
    targets, tdata = [], []
    for rot in cfg.data.target_rotations:
        net, data = adapt(source, cfg, rot, master_seed)
        targets.append(net)
        tdata.append(data)
    return AdaptedModels(source, sdata, targets, tdata)


@dataclass
class MethodResult:
    method: str
    bits: int
    seed: int
    target_acc: list[float]
    distance_to_source: list[float]
    barrier: float
    hmean_naive: float
    hmean_sampled: float
    hmean_random: float
    sampled_score: float
    naive_score: float
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "seed": self.seed, "method": self.method, "bits": self.bits,
            "target_acc_mean": float(np.mean(self.target_acc)),
            "distance_mean": float(np.mean(self.distance_to_source)),
            "barrier": self.barrier, "hmean_naive": self.hmean_naive,
            "hmean_sampled": self.hmean_sampled, "hmean_random": self.hmean_random,
            "sampled_score": self.sampled_score, "naive_score": self.naive_score,
            **self.extra,
        }


def evaluate_method(models: AdaptedModels, cfg: ExperimentConfig, master_seed: int, method: str,
                    bits: int, **ptq_overrides) -> MethodResult:
    """Quantize every target with one method and measure merging quality."""
    results = [quantize(net, models.source, data, cfg, master_seed, method=method,
                        weight_bits=bits, **ptq_overrides)
               for net, data in zip(models.targets, models.target_data)]
    cks = [r.quantized for r in results]
    tests = [d.test for d in models.target_data]
    accs = [checkpoint_accuracy(ck, t) for ck, t in zip(cks, tests)]
    barrier = path_barrier(cks, tests, cfg.analysis.grid_n)
    evalb = models.test_batches
    naive = run_merge(cks, "int_naive", eval_batches=evalb)
    rng = np.random.default_rng(derive_seed(master_seed, f"merge/{method}/{bits}"))
    sampled = merge_noise_sampled(*cks, n_candidates=cfg.merge.n_candidates, rng=rng,
                                  symmetric=cfg.merge.symmetric, eval_batches=evalb)
    single = random_single_sample(cks, np.random.default_rng(derive_seed(master_seed, f"single/{method}/{bits}")),
                                  cfg.merge.symmetric)
    hm_single = _safe_hmean(list(evaluate_checkpoint(single.checkpoint, evalb).values()))
    return MethodResult(method, bits, master_seed, accs, [r.distance_to_source for r in results],
                        barrier, naive.harmonic_mean, sampled.harmonic_mean, hm_single,
                        sampled.chosen.score, float(sampled.all_scores[0]))


def run_seed(cfg: ExperimentConfig, master_seed: int, methods=None, bits_list=None) -> list[MethodResult]:
    models = prepare(cfg, master_seed)
    out = []
    for bits in bits_list or cfg.analysis.bits:
        for method in methods or cfg.analysis.methods:
            out.append(evaluate_method(models, cfg, master_seed, method, bits))
    return out


__all__ = [
    "AdaptedModels", "MethodResult", "adapt", "derive_seed", "distance_penalty", "domain_id",
    "evaluate_method", "harmonic_mean", "make_dataset", "prepare", "quantize", "run_seed",
    "train_source",
]
