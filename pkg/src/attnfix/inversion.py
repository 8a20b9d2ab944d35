"""Trigger reconstruction by joint mask/pattern optimisation against a frozen model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .data import SIDE, TriggerSpec
from .numkernel import ContractError, NumericError, Tape, Tensor

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.01
MASK_THRESHOLD = 0.5


@dataclass
class ClassInversion:
    mask: np.ndarray
    pattern: np.ndarray
    final_loss: float
    l1_mass: float
    flip_rate: float


@dataclass
class InversionResult:
    per_class: dict[int, ClassInversion]
    chosen_target: int
    low_confidence: bool = False
    history: dict[int, list[float]] = field(default_factory=dict)

    def trigger_spec(self, threshold: float = MASK_THRESHOLD) -> TriggerSpec:
        inv = self.per_class[self.chosen_target]
        return to_trigger_spec(inv.mask, inv.pattern, self.chosen_target, threshold)

    def to_json(self) -> dict:
        return {
            "chosen_target": self.chosen_target,
            "low_confidence": self.low_confidence,
            "classes": {str(c): {"final_loss": r.final_loss, "l1_mass": r.l1_mass,
                                 "flip_rate": r.flip_rate} for c, r in self.per_class.items()},
        }


def to_trigger_spec(mask, pattern, target: int, threshold: float = MASK_THRESHOLD) -> TriggerSpec:
    return TriggerSpec((np.asarray(mask) >= threshold).astype(np.float64), pattern, target)


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def compose(images, mask, pattern):
    """``(1 - mask) * x + mask * pattern`` for Tensors or arrays."""
    if isinstance(mask, Tensor):
        return nk.mul(1.0 - mask, images) + nk.mul(mask, pattern)
    return (1.0 - mask) * images + mask * pattern


def invert_trigger(model, clean_images: np.ndarray, target: int, lambda_sparsity: float = DEFAULT_LAMBDA,
                   steps: int = 300, seed: int = 0, lr: float = 0.05,
                   batch_size: int = 32) -> tuple[np.ndarray, np.ndarray, dict]:
    """Optimise a mask and pattern that send clean images to ``target``.

    Both are parameterised through a sigmoid so they stay inside [0, 1]; the
    model itself is only read.
    """
    if len(clean_images) == 0:
        raise ContractError("inversion needs clean data")
    rng = np.random.default_rng(seed)
    u_mask = Tensor(np.zeros((SIDE, SIDE)), requires_grad=True, name="u_mask")
    u_pat = Tensor(rng.normal(0, 0.1, (1, SIDE, SIDE)), requires_grad=True, name="u_pattern")
    opt = nk.AdamW([u_mask, u_pat], lr=lr, weight_decay=0.0)
    losses = []
    for step in range(steps):
        idx = rng.choice(len(clean_images), size=min(batch_size, len(clean_images)), replace=False)
        try:
            with Tape() as tape:
                m = nk.sigmoid(u_mask)
                p = nk.sigmoid(u_pat)
                x = compose(Tensor(clean_images[idx]), nk.reshape(m, (1, 1, SIDE, SIDE)), p)
                logits, _ = model.forward(x)
                ce = nk.cross_entropy(logits, np.full(len(idx), target))
                loss = ce + nk.sum_(m) * lambda_sparsity
            tape.backward(loss)
        except NumericError as err:
            raise NumericError(f"trigger inversion diverged at step {step} (class {target}): {err}") from err
        opt.step()
        losses.append(loss.item())
    mask = _sigmoid(u_mask.data)
    pattern = _sigmoid(u_pat.data)
    stats = {
        "final_loss": losses[-1] if losses else float("nan"),
        "l1_mass": float(mask.sum()),
        "flip_rate": flip_rate(model, clean_images, mask, pattern, target),
        "history": losses,
    }
    return mask, pattern, stats


def flip_rate(model, images, mask, pattern, target: int) -> float:
    x = compose(images, mask.reshape(1, 1, SIDE, SIDE), pattern)
    return float(np.mean(model.predict(x) == target))


def identify_target_class(model, clean_images: np.ndarray, lambda_sparsity: float = DEFAULT_LAMBDA,
                          steps: int = 300, seed: int = 0, min_flip: float = 0.8) -> InversionResult:
    """Invert every class; pick the smallest mask among classes that flip at least
    ``min_flip`` of the clean data (highest flip rate if none does)."""
    n_classes = model.cfg.n_classes
    if n_classes < 2:
        raise ContractError("target identification needs at least two classes")
    per_class, history = {}, {}
    for c in range(n_classes):
        mask, pattern, st = invert_trigger(model, clean_images, c, lambda_sparsity, steps, seed + c)
        history[c] = st.pop("history")
        per_class[c] = ClassInversion(mask, pattern, **st)
        log.info("class %d: l1=%.2f flip=%.3f", c, st["l1_mass"], st["flip_rate"])
    qualified = [c for c, r in per_class.items() if r.flip_rate >= min_flip]
    if qualified:
        chosen = min(qualified, key=lambda c: per_class[c].l1_mass)
    else:
        chosen = max(per_class, key=lambda c: per_class[c].flip_rate)
    masses = np.array([r.l1_mass for r in per_class.values()])
    # confident only when the winning mask is an outlier: under a third of the median
    low = bool(3 * masses.min() > np.median(masses)) or not qualified
    return InversionResult(per_class, chosen, low, history)
