"""Accuracy, attack success, unfairness, strict detector counts and latency."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from ..data import GlyphSample, TabularSample, labels_of, stack_features, stack_images
from ..detector import Detector, aggregate_heads
from ..numkernel import ContractError


class Predictor(Protocol):
    def predict(self, x) -> np.ndarray: ...


def stack(samples) -> np.ndarray:
    if isinstance(samples[0], GlyphSample):
        return stack_images(samples)
    return stack_features(samples)


def eval_accuracy(model: Predictor, samples: Sequence) -> float:
    if len(samples) == 0:
        raise ContractError("accuracy needs a nonempty test set")
    return float(np.mean(model.predict(stack(samples)) == labels_of(samples)))


def eval_asr(model: Predictor, triggered: Sequence[GlyphSample], target: int) -> float:
    """Share of triggered inputs sent to ``target``; inputs already of that class
    are left out."""
    keep = [x for x in triggered if x.label != target]
    if not keep:
        raise ContractError("no triggered samples left after excluding the target class")
    return float(np.mean(model.predict(stack_images(keep)) == target))


def eval_uf(model: Predictor, samples: Sequence[TabularSample], values: Sequence[int] = (0, 1)) -> float:
    """Share of samples whose prediction changes under some protected-value swap."""
    if not samples or not isinstance(samples[0], TabularSample):
        raise ContractError("unfairness is defined for tabular samples only")
    X = stack_features(samples)
    pi = samples[0].protected_index
    base = model.predict(X)
    flipped = np.zeros(len(X), dtype=bool)
    for v in values:
        Xv = X.copy()
        Xv[:, pi] = v
        mask = X[:, pi] != v
        flipped |= mask & (model.predict(Xv) != base)
    return float(flipped.mean())


# ------------------------------------------------------------------ detector

@dataclass
class StrictCounts:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    def metrics(self) -> dict:
        def ratio(a, b):
            return a / b if b else 0.0
        p = ratio(self.tp, self.tp + self.fp)
        r = ratio(self.tp, self.tp + self.fn)
        return {
            "precision": p, "recall": r, "f1": ratio(2 * p * r, p + r),
            "fpr": ratio(self.fp, self.fp + self.tn), "fnr": ratio(self.fn, self.fn + self.tp),
            **asdict(self),
        }


def strict_counts(clean_scores: np.ndarray, comp_scores: np.ndarray, comp_labels: np.ndarray,
                  tau: float) -> StrictCounts:
    """Map-level counting: a compromised map is a hit only when the flagged
    columns equal its labels exactly; a clean map is clean only when nothing
    is flagged."""
    clean_flag = np.asarray(clean_scores) > tau
    comp_flag = np.asarray(comp_scores) > tau
    exact = np.all(comp_flag == (np.asarray(comp_labels) > 0), axis=-1)
    fp = int(clean_flag.any(axis=-1).sum())
    tp = int(exact.sum())
    return StrictCounts(tp=tp, fn=int(exact.size - tp), fp=fp, tn=int(len(clean_flag) - fp))


def eval_detector_strict(detector: Detector, clean_maps: np.ndarray, comp_maps: np.ndarray,
                         comp_labels: np.ndarray, tau: float | None = None) -> dict:
    """Strict precision/recall/F1/FPR/FNR over per-layer maps.

    Maps may carry a head axis (``[m, h, n, n]``) or be head-averaged already.
    """
    tau = detector.cfg.tau if tau is None else tau
    return strict_counts(_scores(detector, clean_maps), _scores(detector, comp_maps),
                         comp_labels, tau).metrics()


def _scores(detector, maps):
    maps = np.asarray(maps)
    return detector.scores(aggregate_heads(maps) if maps.ndim == 4 else maps)


def pr_curve(detector: Detector, clean_maps, comp_maps, comp_labels, taus) -> list[dict]:
    sc, sp = _scores(detector, clean_maps), _scores(detector, comp_maps)
    return [{"tau": float(t), **strict_counts(sc, sp, comp_labels, t).metrics()} for t in taus]


# ------------------------------------------------------------------- latency

def bench_latency(victim, fixer, clean_x: np.ndarray, compromised_x: np.ndarray,
                  repeats: int = 1000, warmup: int = 20) -> dict:
    """Median single-sample latencies in milliseconds.

    ``base_ms`` is a plain forward pass. ``detect_only_ms`` and
    ``detect_and_patch_ms`` are the extra time the hot fix spends detecting,
    and detecting plus patching, measured inside the same hot-fixed runs on
    compromised inputs. ``clean_overhead_ms`` is the full extra time on clean
    inputs, where only detection happens.
    """
    def one(x):
        return x[None]

    for i in range(warmup):
        victim.forward(one(clean_x[i % len(clean_x)]))
        fixer.run(one(compromised_x[i % len(compromised_x)]))
    base, det, both, clean_total = [], [], [], []
    for i in range(repeats):
        xc = one(clean_x[i % len(clean_x)])
        t = time.perf_counter()
        victim.forward(xc)
        base.append(time.perf_counter() - t)
        _, diag = fixer.run(one(compromised_x[i % len(compromised_x)]))
        det.append(diag.timings["detect"])
        both.append(diag.timings["detect"] + diag.timings["patch"])
        _, diag = fixer.run(xc)
        clean_total.append(diag.timings["total"])
    ms = lambda v: 1e3 * float(np.median(v))  # noqa: E731
    return {
        "base_ms": ms(base),
        "detect_only_ms": ms(det),
        "detect_and_patch_ms": ms(both),
        "clean_overhead_ms": max(0.0, ms(clean_total) - ms(base)),
        "repeats": repeats,
    }


# -------------------------------------------------------------------- report

_FRACTIONS = ("acc_before", "acc_after", "asr_before", "asr_after", "uf_before", "uf_after")


@dataclass
class MetricsReport:
    scenario: str
    acc_before: float | None = None
    acc_after: float | None = None
    asr_before: float | None = None
    asr_after: float | None = None
    uf_before: float | None = None
    uf_after: float | None = None
    detector: dict = field(default_factory=dict)
    latency: dict = field(default_factory=dict)
    ablation: list[dict] = field(default_factory=list)

    def validate(self) -> None:
        for name in _FRACTIONS:
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} is not a fraction")
        d = self.detector
        if d:
            p, r = d["precision"], d["recall"]
            expect = 2 * p * r / (p + r) if p + r else 0.0
            if abs(expect - d["f1"]) > 1e-9:
                raise ContractError("detector f1 inconsistent with precision and recall")

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if v is not None and v != {} and v != []}
        return out

    def rows(self) -> list[dict]:
        """One JSON-lines object per metric."""
        out = []
        for name in _FRACTIONS:
            v = getattr(self, name)
            if v is not None:
                out.append({"scenario": self.scenario, "metric": name, "value": v})
        for group in ("detector", "latency"):
            for k, v in getattr(self, group).items():
                out.append({"scenario": self.scenario, "metric": f"{group}.{k}", "value": v})
        for row in self.ablation:
            out.append({"scenario": self.scenario, "metric": "ablation", **row})
        return out
