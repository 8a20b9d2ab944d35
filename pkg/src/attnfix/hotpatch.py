"""Benign reference maps, the replace-and-rescale patch, and hot-fixed inference."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .detector import Detector, aggregate_heads
from .numkernel import ContractError, DimensionError

DEFAULT_EPS = 1e-8
_ROW_REPAIR_TOL = 1e-6


class PatchInfeasibleError(ContractError):
    pass


@dataclass
class BenignReference:
    """Per-layer mean attention over clean samples and heads; ``maps[l][i, k]``
    is the reference weight query ``i`` puts on token ``k``."""

    maps: list[np.ndarray]
    sample_count: int

    @property
    def token_count(self) -> int:
        return self.maps[0].shape[-1]

    def save(self, directory) -> None:
        d = Path(directory)
        nk.save_checkpoint(d, {f"layer{l}": m for l, m in enumerate(self.maps)})
        (d / "meta.json").write_text(json.dumps({
            "layers": len(self.maps), "n": self.token_count, "sample_count": self.sample_count}))

    @classmethod
    def load(cls, directory) -> "BenignReference":
        d = Path(directory)
        tensors, _ = nk.load_checkpoint(d)
        meta = json.loads((d / "meta.json").read_text())
        return cls([tensors[f"layer{l}"] for l in range(meta["layers"])], meta["sample_count"])


def build_benign_reference(victim, clean_inputs: np.ndarray, batch_size: int = 256) -> BenignReference:
    """Average the head-averaged attention maps of ``clean_inputs`` per layer."""
    if len(clean_inputs) == 0:
        raise ContractError("benign reference needs at least one clean sample")
    sums = None
    for start in range(0, len(clean_inputs), batch_size):
        _, trace = victim.forward(clean_inputs[start:start + batch_size])
        part = [aggregate_heads(A).sum(axis=0) for A in trace.maps]
        sums = part if sums is None else [s + p for s, p in zip(sums, part)]
    return BenignReference([s / len(clean_inputs) for s in sums], len(clean_inputs))


def patch_attention(A: np.ndarray, columns: Sequence[int], Q: np.ndarray,
                    eps: float = DEFAULT_EPS, rescale: bool = True) -> np.ndarray:
    """Replace ``columns`` of every head's map with the reference values and
    rescale the other columns of each row by one common factor so rows still
    sum to one.

    ``A`` is ``[..., n, n]``; ``Q`` is ``[n, n]``. With ``rescale=False`` the
    columns are overwritten and nothing else changes.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[-1]
    if Q.shape != (n, n):
        raise DimensionError(f"reference shape {Q.shape} does not match maps {A.shape}")
    cols = sorted(set(int(c) for c in columns))
    if not cols:
        raise ContractError("patch needs at least one column; an empty set means bypass")
    if cols[0] < 0 or cols[-1] >= n:
        raise IndexError(f"patch column out of range [0, {n}): {cols}")
    q = Q[:, cols]  # [n, |K|]
    q_mass = q.sum(axis=1)
    bad = np.flatnonzero(q_mass >= 1.0)
    if bad.size:
        raise PatchInfeasibleError(f"reference mass on {cols} reaches 1 in row {int(bad[0])}")
    out = A.copy()
    if rescale:
        a_mass = A[..., cols].sum(axis=-1)
        factor = (1.0 - q_mass) / (1.0 - a_mass + eps)
        out *= factor[..., None]
    out[..., cols] = q
    if rescale:
        np.maximum(out, 0.0, out=out)
        _repair_rows(out, cols, q_mass)
    return out


def _repair_rows(out: np.ndarray, cols: list[int], q_mass: np.ndarray) -> None:
    # rows whose mass sat almost entirely on the patched columns
    dev = np.abs(out.sum(axis=-1) - 1.0)
    if dev.max() <= _ROW_REPAIR_TOL:
        return
    others = np.ones(out.shape[-1], dtype=bool)
    others[cols] = False
    for idx in zip(*np.nonzero(dev > _ROW_REPAIR_TOL)):
        row = out[idx]
        rest = row[others]
        target = 1.0 - q_mass[idx[-1]]
        s = rest.sum()
        row[others] = rest * (target / s) if s > 0 else target / others.sum()


# ------------------------------------------------------------------ hot fix

@dataclass
class HotFixDiagnostics:
    flagged: list[set[tuple[int, int]]]
    patched: np.ndarray
    timings: dict[str, float] = field(default_factory=dict)


class HotFixer:
    """Detect over-attention layer by layer and patch it before ``A @ V``.

    ``mode='streaming'`` scores and patches each layer during one forward, so
    later layers see repaired features. ``mode='two_pass'`` records every map
    first, then reruns with patched versions of the recorded maps at the
    flagged layers.

    ``selector='random'`` ignores the detector and patches 1-3 random columns
    per map; ``rescale=False`` overwrites columns without rescaling the rest.
    """

    def __init__(self, victim, detector: Detector | None, reference: BenignReference,
                 tau: float = 0.1, mode: str = "streaming", eps: float = DEFAULT_EPS,
                 selector: str = "detector", rescale: bool = True, seed: int = 0):
        if mode not in ("streaming", "two_pass"):
            raise ContractError(f"unknown mode {mode!r}")
        if selector not in ("detector", "random"):
            raise ContractError(f"unknown selector {selector!r}")
        if selector == "detector" and detector is None:
            raise ContractError("detector selector needs a trained detector")
        if reference.token_count != victim.cfg.token_count:
            raise ContractError("benign reference does not match the victim")
        self.victim = victim
        self.detector = detector
        self.reference = reference
        self.tau = tau
        self.mode = mode
        self.eps = eps
        self.selector = selector
        self.rescale = rescale
        self.rng = np.random.default_rng(seed)

    def _select(self, A: np.ndarray) -> list[np.ndarray]:
        """Flagged columns for each sample's map ``A[b, h, n, n]``."""
        b, n = A.shape[0], A.shape[-1]
        if self.selector == "random":
            return [self.rng.choice(n, size=self.rng.integers(1, 4), replace=False) for _ in range(b)]
        scores = self.detector.scores(aggregate_heads(A))
        return [np.flatnonzero(s > self.tau) for s in scores]

    def _patch_batch(self, A, picks, layer):
        Q = self.reference.maps[layer]
        out = None
        for i, cols in enumerate(picks):
            if len(cols):
                if out is None:
                    out = A.copy()
                out[i] = patch_attention(A[i], cols, Q, self.eps, self.rescale)
        return out

    def run(self, x) -> tuple[np.ndarray, HotFixDiagnostics]:
        """Hot-fixed logits for a batch of raw inputs."""
        b = len(x)
        flagged = [set() for _ in range(b)]
        clock = {"detect": 0.0, "patch": 0.0}

        def note(layer, picks):
            for i, cols in enumerate(picks):
                flagged[i].update((layer, int(c)) for c in cols)

        t0 = time.perf_counter()
        if self.mode == "streaming":
            def hook(layer, A):
                t = time.perf_counter()
                picks = self._select(A)
                clock["detect"] += time.perf_counter() - t
                note(layer, picks)
                t = time.perf_counter()
                out = self._patch_batch(A, picks, layer)
                clock["patch"] += time.perf_counter() - t
                return out

            logits, _ = self.victim.forward(x, hook, check_rows=self.rescale)
        else:
            _, trace = self.victim.forward(x)
            t = time.perf_counter()
            picks = [self._select(A) for A in trace.maps]
            clock["detect"] += time.perf_counter() - t
            overrides = {}
            t = time.perf_counter()
            for layer, p in enumerate(picks):
                note(layer, p)
                patched = self._patch_batch(trace.maps[layer], p, layer)
                if patched is not None:
                    overrides[layer] = (patched, np.array([len(c) > 0 for c in p]))
            clock["patch"] += time.perf_counter() - t
            if overrides:
                def hook(layer, A):
                    if layer not in overrides:
                        return None
                    patched, rows = overrides[layer]
                    out = A.copy()
                    out[rows] = patched[rows]
                    return out

                logits, _ = self.victim.forward(x, hook, check_rows=self.rescale)
            else:
                logits, _ = self.victim.forward(x)
        total = time.perf_counter() - t0
        clock["total"] = total
        clock["forward"] = total - clock["detect"] - clock["patch"]
        patched = np.array([bool(f) for f in flagged])
        return logits.data, HotFixDiagnostics(flagged, patched, clock)

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        out = [self.run(x[i:i + batch_size])[0].argmax(-1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def hotfix_predict(x, victim, detector, reference, tau: float = 0.1, mode: str = "streaming"):
    """Single-sample hot-fixed prediction: ``(label, diagnostics)``."""
    fixer = HotFixer(victim, detector, reference, tau, mode)
    logits, diag = fixer.run(np.asarray(x)[None])
    return int(logits[0].argmax()), {
        "K": sorted(diag.flagged[0]),
        "patched": bool(diag.patched[0]),
        "logits": logits[0],
        "latency": diag.timings,
    }
