"""Merging quantized target models.

Strategies:

``fp_midpoint``
    Average the dequantized weights; the result stays in floating point.
``int_naive``
    Per tensor ``I = round((sum_i I_i * step_i) / sum_i step_i)`` with ties
    rounded half to even, merged step ``mean(step_i)``.
``noise_sampled``
    Same formula with ``U[-step_i/2, step_i/2]`` noise added to each
    ``I_i * step_i`` before rounding.  Many candidates are drawn and the one
    whose displacement from the targets best lines up with the interpolation
    direction (cosine score) is kept.  The naive merge is always candidate 0.

Biases are stored in float and are averaged in every strategy.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import QuantizedCheckpoint
from .nnet import Batch, DimensionError, Network, accuracy, check_same_architecture
from .quant import QuantizedTensor, QuantScheme

STRATEGIES = ("fp_midpoint", "int_naive", "noise_sampled")
DEFAULT_CANDIDATES = 30
_TIE_SNAP = 1e-9


@dataclass
class MergeCandidate:
    checkpoint: QuantizedCheckpoint
    score: float
    seed: int | None = None  # None for the deterministic naive candidate

    @property
    def weights(self) -> Network:
        return self.checkpoint.to_network()

    @property
    def ints(self) -> list[np.ndarray]:
        return [w.ints for w in self.checkpoint.weights if isinstance(w, QuantizedTensor)]


@dataclass
class MergeReport:
    strategy: str
    chosen: MergeCandidate
    all_scores: np.ndarray
    candidates: list[MergeCandidate] = field(default_factory=list, repr=False)
    per_domain_metric: dict[str, float] = field(default_factory=dict)
    harmonic_mean: float | None = None
    candidate_hmeans: list[float] | None = None

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "chosen_seed": self.chosen.seed,
            "chosen_score": self.chosen.score,
            "all_scores": [float(s) for s in self.all_scores],
            "per_domain_metric": self.per_domain_metric,
            "harmonic_mean": self.harmonic_mean,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_scores_csv(self, path: str | Path) -> None:
        """Rows of ``seed,score,hmean`` for every candidate (seed -1 = naive)."""
        hm = self.candidate_hmeans or [float("nan")] * len(self.candidates)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "score", "hmean"])
            for c, h in zip(self.candidates, hm):
                w.writerow([-1 if c.seed is None else c.seed, repr(float(c.score)), repr(float(h))])


def harmonic_mean(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or np.any(v <= 0):
        raise ValueError("harmonic mean needs positive values")
    return float(v.size / np.sum(1.0 / v))


def _safe_hmean(values) -> float:
    return 0.0 if min(values) <= 0 else harmonic_mean(values)


def merge_fp_midpoint(a: Network, b: Network, *more: Network) -> Network:
    nets = (a, b) + more
    check_same_architecture(*nets)
    n = len(nets)
    params = [sum(ps) / n for ps in zip(*(net.params() for net in nets))]
    return a.with_params(params)


def round_half_even(x: np.ndarray) -> np.ndarray:
    """Half-to-even rounding; values within 1e-9 of a half-integer count as ties."""
    x = np.asarray(x, dtype=np.float64)
    halves = np.round(2.0 * x) / 2.0
    snapped = np.where(np.abs(x - halves) < _TIE_SNAP, halves, x)
    return np.round(snapped)


def _check_mergeable(cks: list[QuantizedCheckpoint]) -> None:
    if len(cks) < 2:
        raise ValueError("need at least two checkpoints to merge")
    first = cks[0]
    for ck in cks[1:]:
        if len(ck.weights) != len(first.weights):
            raise DimensionError("checkpoints have different layer counts")
        for k, (wa, wb) in enumerate(zip(first.weights, ck.weights)):
            if np.shape(getattr(wa, "ints", wa)) != np.shape(getattr(wb, "ints", wb)):
                raise DimensionError(f"layer {k} weight shapes differ")
            qa, qb = isinstance(wa, QuantizedTensor), isinstance(wb, QuantizedTensor)
            if qa != qb or (qa and wa.scheme.bits != wb.scheme.bits):
                raise DimensionError(f"layer {k} bit widths differ")


def _merge_acts(cks):
    out = []
    for schemes in zip(*(ck.act_schemes for ck in cks)):
        if any(s is None for s in schemes):
            out.append(None)
        else:
            out.append(QuantScheme(schemes[0].bits, float(np.mean([s.step for s in schemes])), "activation"))
    return out


def _integer_merge(cks: list[QuantizedCheckpoint], rng: np.random.Generator | None) -> QuantizedCheckpoint:
    weights = []
    for layer in zip(*(ck.weights for ck in cks)):
        if not isinstance(layer[0], QuantizedTensor):
            weights.append(sum(np.asarray(w) for w in layer) / len(layer))
            continue
        steps = [q.scheme.step for q in layer]
        num = np.zeros(layer[0].shape)
        for q, s in zip(layer, steps):
            num = num + q.ints * s
            if rng is not None:
                num = num + rng.uniform(-s / 2.0, s / 2.0, size=q.shape)
        merged = QuantScheme(layer[0].scheme.bits, float(np.mean(steps)))
        ints = np.clip(round_half_even(num / sum(steps)), merged.qmin, merged.qmax)
        weights.append(QuantizedTensor(ints.astype(np.int64), merged))
    biases = [sum(bs) / len(bs) for bs in zip(*(ck.biases for ck in cks))]
    return QuantizedCheckpoint(weights, biases, _merge_acts(cks), cks[0].source_hash)


def cosine_score(candidate: Network, t1: Network, t2: Network, *more: Network,
                 symmetric: bool = True) -> float:
    """Alignment of the merged point with the interpolation direction.

    For two targets: ``0.5 * (cos(t1 - m, t1 - t2) + cos(t2 - m, t2 - t1))``;
    with ``symmetric=False`` only the first term.  For K targets each term is
    ``cos(t_i - m, t_i - centroid)`` and the terms are averaged.  A zero
    vector contributes 0.
    """
    targets = (t1, t2) + more
    check_same_architecture(candidate, *targets)
    m = candidate.flat()
    ts = [t.flat() for t in targets]
    centroid = sum(ts) / len(ts)
    terms = [_cos(t - m, t - centroid) for t in ts]
    if not symmetric:
        terms = terms[:1]
    return float(np.clip(np.mean(terms), -1.0, 1.0))


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def merge_int_naive(qa: QuantizedCheckpoint, qb: QuantizedCheckpoint, *more: QuantizedCheckpoint,
                    symmetric: bool = True) -> MergeCandidate:
    cks = [qa, qb, *more]
    _check_mergeable(cks)
    merged = _integer_merge(cks, None)
    score = cosine_score(merged.to_network(), *(ck.to_network() for ck in cks), symmetric=symmetric)
    return MergeCandidate(merged, score, None)


def _sampled_candidate(cks, targets, seed, symmetric):
    merged = _integer_merge(cks, np.random.default_rng(seed))
    return MergeCandidate(merged, cosine_score(merged.to_network(), *targets, symmetric=symmetric), seed)


def merge_noise_sampled(qa: QuantizedCheckpoint, qb: QuantizedCheckpoint, *more: QuantizedCheckpoint,
                        n_candidates: int = DEFAULT_CANDIDATES, rng: np.random.Generator | None = None,
                        symmetric: bool = True, jobs: int = 1,
                        eval_batches: dict[str, Batch] | None = None) -> MergeReport:
    """Draw ``n_candidates`` noisy integer merges and keep the best-scoring one.

    Candidate 0 is the naive merge.  Each sampled candidate has its own seed
    drawn from ``rng`` so candidates can be built in any order or in parallel;
    ties in score go to the lowest index.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    cks = [qa, qb, *more]
    _check_mergeable(cks)
    rng = rng if rng is not None else np.random.default_rng(0)
    targets = [ck.to_network() for ck in cks]
    seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=n_candidates)]
    naive = merge_int_naive(*cks, symmetric=symmetric)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            sampled = list(pool.map(lambda s: _sampled_candidate(cks, targets, s, symmetric), seeds))
    else:
        sampled = [_sampled_candidate(cks, targets, s, symmetric) for s in seeds]
    candidates = [naive] + sampled
    scores = np.array([c.score for c in candidates])
    chosen = candidates[int(np.argmax(scores))]
    report = MergeReport("noise_sampled", chosen, scores, candidates)
    if eval_batches:
        evaluate_report(report, eval_batches, all_candidates=True)
    return report


def evaluate_checkpoint(ck: QuantizedCheckpoint, eval_batches: dict[str, Batch]) -> dict[str, float]:
    net, hook = ck.to_network(), ck.act_hook()
    return {name: accuracy(net, b, hook) for name, b in eval_batches.items()}


def evaluate_report(report: MergeReport, eval_batches: dict[str, Batch], all_candidates: bool = False) -> MergeReport:
    report.per_domain_metric = evaluate_checkpoint(report.chosen.checkpoint, eval_batches)
    report.harmonic_mean = _safe_hmean(list(report.per_domain_metric.values()))
    if all_candidates:
        report.candidate_hmeans = [
            _safe_hmean(list(evaluate_checkpoint(c.checkpoint, eval_batches).values()))
            for c in report.candidates
        ]
    return report


def run_merge(cks: list[QuantizedCheckpoint], strategy: str, *, n_candidates: int = DEFAULT_CANDIDATES,
              rng: np.random.Generator | None = None, symmetric: bool = True, jobs: int = 1,
              eval_batches: dict[str, Batch] | None = None) -> MergeReport:
    """Merge with the named strategy and optionally score the result per domain."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    _check_mergeable(cks)
    if strategy == "noise_sampled":
        return merge_noise_sampled(*cks, n_candidates=n_candidates, rng=rng, symmetric=symmetric,
                                   jobs=jobs, eval_batches=eval_batches)
    if strategy == "int_naive":
        chosen = merge_int_naive(*cks, symmetric=symmetric)
    else:
        nets = [ck.to_network() for ck in cks]
        mid = merge_fp_midpoint(*nets)
        ck = QuantizedCheckpoint.from_network(mid, cks[0].source_hash)
        ck.act_schemes = _merge_acts(cks)
        chosen = MergeCandidate(ck, cosine_score(mid, *nets, symmetric=symmetric), None)
    report = MergeReport(strategy, chosen, np.array([chosen.score]), [chosen])
    if eval_batches:
        evaluate_report(report, eval_batches, all_candidates=True)
    return report


def random_single_sample(cks: list[QuantizedCheckpoint], rng: np.random.Generator,
                         symmetric: bool = True) -> MergeCandidate:
    """One noisy integer merge with no selection (the unfiltered baseline)."""
    _check_mergeable(cks)
    targets = [ck.to_network() for ck in cks]
    return _sampled_candidate(cks, targets, int(rng.integers(0, 2**63 - 1)), symmetric)
