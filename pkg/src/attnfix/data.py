"""Synthetic datasets, backdoor poisoning, bias injection and debugging sets."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .numkernel import ContractError
from .numkernel import serialize

log = logging.getLogger(__name__)

SIDE = 16
N_GLYPH_CLASSES = 4
GLYPH_INK = 0.8
NOISE_MAX = 0.2


class EmptyDebugSetError(ContractError):
    pass


@dataclass(frozen=True)
class GlyphSample:
    image: np.ndarray  # [1, 16, 16]
    label: int
    poisoned: bool = False
    trigger_patch_ids: tuple[int, ...] = ()
    uid: str = ""


@dataclass(frozen=True)
class TabularSample:
    features: tuple[int, ...]
    label: int
    protected_index: int = 0
    uid: str = ""


Sample = Union[GlyphSample, TabularSample]


@dataclass
class TriggerSpec:
    mask: np.ndarray     # [16, 16]
    pattern: np.ndarray  # [1, 16, 16]
    target_class: int
    blend_alpha: float = 1.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.pattern = np.asarray(self.pattern, dtype=np.float64).reshape(1, *self.mask.shape)
        if not 0.0 < self.blend_alpha <= 1.0:
            raise ContractError("blend_alpha must lie in (0, 1]")
        if self.mask.min() < 0 or self.mask.max() > 1:
            raise ContractError("trigger mask must lie in [0, 1]")

    @property
    def area(self) -> int:
        return int((self.mask > 0).sum())


@dataclass
class DebugPair:
    clean: Sample
    compromised: Sample
    anomalous_columns: tuple[int, ...]


@dataclass
class DebuggingSet:
    pairs: list[DebugPair]
    kind: str  # "backdoor" | "unfairness"
    clean_pool: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def validate(self, token_count: int) -> None:
        for p in self.pairs:
            if not p.anomalous_columns:
                raise ContractError("compromised sample without anomalous columns")
            if any(not 0 <= c < token_count for c in p.anomalous_columns):
                raise ContractError(f"anomalous column out of range in {p.compromised.uid}")


# ----------------------------------------------------------------- glyphs

def _draw_glyph(label: int, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((SIDE, SIDE))
    lo, hi = 2, 13  # keep glyph ink off the outer ring of pixels
    if label == 0:
        # one bar in each half with a ragged extent
        rows = (rng.integers(lo, 7), rng.integers(9, hi + 1))
        for r in rows:
            img[r, rng.integers(lo, 5):rng.integers(11, hi + 2)] = 1
    elif label == 1:
        cols = (rng.integers(lo, 7), rng.integers(9, hi + 1))
        for c in cols:
            img[rng.integers(lo, 5):rng.integers(11, hi + 2), c] = 1
    elif label == 2:
        r, c = rng.integers(6, 10, size=2)
        img[r, lo:hi + 1] = 1
        img[lo:hi + 1, c] = 1
    else:
        cy, cx = rng.uniform(6.5, 8.5, size=2)
        rad = rng.uniform(3.5, 4.8)
        yy, xx = np.mgrid[:SIDE, :SIDE]
        dist = np.hypot(yy - cy, xx - cx)
        img[np.abs(dist - rad) < 0.7] = 1
    return img * GLYPH_INK


def gen_glyphs(count: int, seed: int, prefix: str = "glyph") -> list[GlyphSample]:
    """Balanced 4-class procedural glyphs with additive uniform noise."""
    if count < 1:
        raise ContractError("count must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % N_GLYPH_CLASSES)
    out = []
    for i, y in enumerate(labels):
        img = _draw_glyph(int(y), rng) + rng.uniform(0, NOISE_MAX, (SIDE, SIDE))
        out.append(GlyphSample(np.clip(img, 0, 1)[None], int(y), uid=f"{prefix}:{seed}:{i}"))
    return out


def corner_trigger(size: int = 2, target_class: int = 0, value: float = 1.0,
                   blend_alpha: float = 1.0) -> TriggerSpec:
    """A ``size`` x ``size`` solid square stamped in the bottom-right corner."""
    mask = np.zeros((SIDE, SIDE))
    mask[SIDE - size:, SIDE - size:] = 1
    return TriggerSpec(mask, np.full((1, SIDE, SIDE), value), target_class, blend_alpha)


def mask_to_columns(mask: np.ndarray, patch: int = 4) -> tuple[int, ...]:
    """Token indices (CLS offset included) of patches touched by the mask support."""
    support = np.asarray(mask) > 0
    g = support.shape[0] // patch
    hit = support.reshape(g, patch, g, patch).any(axis=(1, 3))
    return tuple(int(i) + 1 for i in np.flatnonzero(hit.reshape(-1)))


def apply_trigger(x: GlyphSample, t: TriggerSpec, patch: int = 4) -> GlyphSample:
    if x.image.shape != t.pattern.shape:
        raise ContractError(f"image {x.image.shape} vs trigger pattern {t.pattern.shape}")
    if t.area == 0:
        return x
    m = t.blend_alpha * t.mask
    img = (1 - m) * x.image + m * t.pattern
    return replace(x, image=img, poisoned=True, trigger_patch_ids=mask_to_columns(t.mask, patch),
                   uid=x.uid + "+trig")


def poison_dataset(data: Sequence[GlyphSample], t: TriggerSpec, rate: float,
                   seed: int = 0) -> list[GlyphSample]:
    """Trigger and relabel ``floor(rate * len(data))`` uniformly chosen samples."""
    if not 0 < rate < 1:
        raise ContractError(f"poison rate must lie in (0, 1), got {rate}")
    if t.area == 0:
        raise ContractError("trigger mask is empty")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(data), size=math.floor(rate * len(data)), replace=False).tolist())
    out = []
    for i, x in enumerate(data):
        if i in chosen:
            out.append(replace(apply_trigger(x, t), label=t.target_class))
        else:
            out.append(x)
    return out


def stack_images(samples: Sequence[GlyphSample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def labels_of(samples: Sequence[Sample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


# ---------------------------------------------------------------- tabular

TAB_VOCAB = (2, 4, 4, 4, 4, 4)
PROTECTED = 0


def tabular_rule(features) -> int:
    f = features
    return int(f[1] + f[2] + f[3] >= 5)


def gen_tabular_biased(count: int, bias_strength: float, seed: int,
                       prefix: str = "tab") -> list[TabularSample]:
    """Six categorical features, feature 0 a binary protected attribute.

    The label follows a fixed rule on features 1-3; with probability
    ``bias_strength`` it is then overwritten by the protected value.
    """
    if not 0.0 <= bias_strength <= 1.0:
        raise ContractError("bias_strength must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    feats = np.stack([rng.integers(0, v, size=count) for v in TAB_VOCAB], axis=1)
    flip = rng.random(count) < bias_strength
    out = []
    for i in range(count):
        f = tuple(int(v) for v in feats[i])
        y = f[PROTECTED] if flip[i] else tabular_rule(f)
        out.append(TabularSample(f, int(y), PROTECTED, uid=f"{prefix}:{seed}:{i}"))
    return out


def stack_features(samples: Sequence[TabularSample]) -> np.ndarray:
    return np.array([s.features for s in samples], dtype=np.int64)


def enumerate_perturbations(x: TabularSample, values: Sequence[int]) -> list[TabularSample]:
    values = list(dict.fromkeys(values))
    if len(values) < 2:
        raise ContractError("protected attribute needs at least two values")
    a = x.features[x.protected_index]
    if a not in values:
        raise ContractError(f"protected value {a} not in {values}")
    out = []
    for v in values:
        if v == a:
            continue
        f = list(x.features)
        f[x.protected_index] = v
        out.append(replace(x, features=tuple(f), uid=f"{x.uid}~{v}"))
    return out


def hamming_nearest(query: Sequence[int], pool: np.ndarray) -> int:
    """Index of the pool row closest to ``query`` in Hamming distance; lowest index on ties."""
    d = (np.asarray(pool) != np.asarray(query)[None]).sum(axis=1)
    return int(np.argmin(d))


# ----------------------------------------------------------- debugging sets

def build_backdoor_debugset(model, clean_data: Sequence[GlyphSample], t: TriggerSpec,
                            size: int) -> DebuggingSet:
    """Pair clean samples with triggered copies that the model sends to the target."""
    if t.area == 0:
        raise ContractError("trigger mask is empty")
    candidates = [x for x in clean_data if x.label != t.target_class]
    patch = model.cfg.patch
    pairs = []
    for start in range(0, len(candidates), 256):
        chunk = candidates[start:start + 256]
        trig = [apply_trigger(x, t, patch) for x in chunk]
        pred = model.predict(stack_images(trig))
        for x, xt, p in zip(chunk, trig, pred):
            if p == t.target_class:
                pairs.append(DebugPair(x, xt, xt.trigger_patch_ids))
                if len(pairs) == size:
                    break
        if len(pairs) == size:
            break
    if len(pairs) < size:
        log.warning("backdoor debugging set is partial: %d of %d requested pairs", len(pairs), size)
    ds = DebuggingSet(pairs, "backdoor", [p.clean for p in pairs])
    ds.validate(model.cfg.token_count)
    return ds


def divergent_variants(model, data: Sequence[TabularSample], values: Sequence[int],
                       predict=None) -> tuple[list[TabularSample], list[TabularSample], np.ndarray]:
    """Split ``data`` by whether some protected swap changes the prediction.

    Returns (divergent variants x', their source samples, per-sample divergence mask).
    """
    predict = predict or model.predict
    base = predict(stack_features(data))
    variants, owners = [], []
    for i, x in enumerate(data):
        for v in enumerate_perturbations(x, values):
            variants.append(v)
            owners.append(i)
    vpred = predict(stack_features(variants)) if variants else np.zeros(0, dtype=np.int64)
    owners = np.asarray(owners, dtype=np.int64)
    flips = vpred != base[owners]
    divergent = np.zeros(len(data), dtype=bool)
    divergent[owners[flips]] = True
    comp = [variants[k] for k in np.flatnonzero(flips)]
    src = [data[owners[k]] for k in np.flatnonzero(flips)]
    return comp, src, divergent


def build_bias_debugset(model, data: Sequence[TabularSample],
                        values: Sequence[int] = (0, 1)) -> DebuggingSet:
    """Compromised samples are prediction-flipping protected swaps; each is paired
    with the non-divergent sample of the same protected value nearest in Hamming
    distance (the unperturbed source when no such sample exists)."""
    comp, src, divergent = divergent_variants(model, data, values)
    if not comp:
        raise EmptyDebugSetError("no divergent samples: model already fair at this sample budget")
    clean = [x for x, d in zip(data, divergent) if not d]
    clean_feats = stack_features(clean) if clean else np.zeros((0, len(data[0].features)), np.int64)
    pairs = []
    for xp, x0 in zip(comp, src):
        pi = xp.protected_index
        same = np.flatnonzero(clean_feats[:, pi] == xp.features[pi]) if len(clean) else np.zeros(0, int)
        partner = clean[same[hamming_nearest(xp.features, clean_feats[same])]] if len(same) else x0
        pairs.append(DebugPair(partner, xp, (pi + 1,)))
    ds = DebuggingSet(pairs, "unfairness", clean)
    ds.validate(len(data[0].features) + 1)
    return ds


# ---------------------------------------------------------------- persistence

def _sample_meta(s: Sample) -> dict:
    if isinstance(s, GlyphSample):
        return {"uid": s.uid, "label": s.label, "poisoned": s.poisoned,
                "trigger_patch_ids": list(s.trigger_patch_ids)}
    return {"uid": s.uid, "label": s.label, "features": list(s.features),
            "protected_index": s.protected_index}


def _sample_from(meta: dict, image: np.ndarray | None) -> Sample:
    if "features" in meta:
        return TabularSample(tuple(meta["features"]), meta["label"], meta["protected_index"], meta["uid"])
    return GlyphSample(image, meta["label"], meta["poisoned"], tuple(meta["trigger_patch_ids"]),
                       meta["uid"])


def save_samples(directory, name: str, samples: Sequence[Sample]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"name": name, "samples": [_sample_meta(s) for s in samples]}
    if samples and isinstance(samples[0], GlyphSample):
        serialize.save_tensor(d / f"{name}.atpt", stack_images(samples))
    (d / f"{name}.json").write_text(json.dumps(manifest))


def load_samples(directory, name: str) -> list[Sample]:
    d = Path(directory)
    manifest = json.loads((d / f"{name}.json").read_text())
    tpath = d / f"{name}.atpt"
    images = serialize.load_tensor(tpath) if tpath.exists() else None
    return [_sample_from(m, None if images is None else images[i])
            for i, m in enumerate(manifest["samples"])]


def save_debugset(directory, ds: DebuggingSet) -> None:
    d = Path(directory)
    save_samples(d, "clean", [p.clean for p in ds.pairs])
    save_samples(d, "compromised", [p.compromised for p in ds.pairs])
    save_samples(d, "pool", ds.clean_pool)
    (d / "manifest.json").write_text(json.dumps({
        "kind": ds.kind,
        "anomalous_columns": [list(p.anomalous_columns) for p in ds.pairs],
    }))


def load_debugset(directory) -> DebuggingSet:
    d = Path(directory)
    meta = json.loads((d / "manifest.json").read_text())
    clean = load_samples(d, "clean")
    comp = load_samples(d, "compromised")
    pool = load_samples(d, "pool") if (d / "pool.json").exists() else []
    pairs = [DebugPair(c, x, tuple(cols)) for c, x, cols in zip(clean, comp, meta["anomalous_columns"])]
    return DebuggingSet(pairs, meta["kind"], pool)
