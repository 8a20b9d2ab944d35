"""Per-column over-attention scorer trained on clean/compromised attention maps.

Pipeline for one layer's map: average the heads, run a two-stage 3x3 CNN over
the ``n x n`` map as a one-channel image, mean-pool the rows so each column
keeps a 16-d feature, then a shared MLP + sigmoid per column.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numkernel as nk
from .numkernel import ContractError, DimensionError, NumericError, Tape, Tensor

log = logging.getLogger(__name__)

PROB_CLIP = 1e-7
TEMPERATURE = 0.1


@dataclass
class DetectorConfig:
    token_count: int
    conv_channels: list[int] = field(default_factory=lambda: [8, 16])
    column_feature_dim: int = 16
    mlp_hidden: int = 32
    tau: float = 0.1
    lambda_contrast: float = 1.0
    temperature: float = TEMPERATURE

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ContractError("tau must lie in (0, 1]")
        if self.lambda_contrast < 0:
            raise ContractError("lambda_contrast must be non-negative")
        if self.conv_channels[-1] != self.column_feature_dim:
            raise ContractError("last conv width must equal the column feature size")

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate_heads(maps: np.ndarray) -> np.ndarray:
    """Mean over the head axis: ``[..., h, n, n] -> [..., n, n]``."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim < 3 or maps.shape[-3] < 1:
        raise DimensionError(f"expected [..., heads, n, n], got {maps.shape}")
    return maps.mean(axis=-3)


class Detector:
    def __init__(self, cfg: DetectorConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        c_in = 1
        for i, c in enumerate(cfg.conv_channels):
            std = np.sqrt(2.0 / (9 * c_in))
            self.params[f"conv{i}.k"] = Tensor(rng.normal(0, std, (c, c_in, 3, 3)), name=f"conv{i}.k")
            self.params[f"conv{i}.b"] = Tensor(np.zeros(c), name=f"conv{i}.b")
            c_in = c
        f, hdim = cfg.column_feature_dim, cfg.mlp_hidden
        self.params["mlp1.w"] = Tensor(rng.normal(0, np.sqrt(2.0 / f), (f, hdim)), name="mlp1.w")
        self.params["mlp1.b"] = Tensor(np.zeros(hdim), name="mlp1.b")
        self.params["mlp2.w"] = Tensor(rng.normal(0, np.sqrt(1.0 / hdim), (hdim, 1)), name="mlp2.w")
        self.params["mlp2.b"] = Tensor(np.zeros(1), name="mlp2.b")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def fingerprint(self) -> bytes:
        return b"".join(self.params[k].data.tobytes() for k in sorted(self.params))

    def forward(self, maps) -> tuple[Tensor, Tensor]:
        """Score head-averaged maps ``[b, n, n]`` (or a single ``[n, n]``).

        Returns ``(probs[b, n], column_features[b, n, f])``.
        """
        x = maps if isinstance(maps, Tensor) else Tensor(maps)
        single = x.ndim == 2
        if single:
            x = x.reshape(1, *x.shape)
        n = self.cfg.token_count
        if x.ndim != 3 or x.shape[1:] != (n, n):
            raise DimensionError(f"detector expects [b, {n}, {n}] maps, got {x.shape}")
        h = x.reshape(x.shape[0], 1, n, n)
        for i in range(len(self.cfg.conv_channels)):
            k, b = self.params[f"conv{i}.k"], self.params[f"conv{i}.b"]
            h = nk.relu(nk.conv2d(h, k) + nk.reshape(b, (1, -1, 1, 1)))
        feats = nk.transpose(nk.mean(h, axis=2), (0, 2, 1))  # [b, n, f]
        z = nk.relu(nk.matmul(feats, self.params["mlp1.w"]) + self.params["mlp1.b"])
        logit = nk.matmul(z, self.params["mlp2.w"]) + self.params["mlp2.b"]
        probs = nk.sigmoid(nk.reshape(logit, (x.shape[0], n)))
        if single:
            return nk.reshape(probs, (n,)), nk.reshape(feats, (n, -1))
        return probs, feats

    def scores(self, maps: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Anomaly probabilities for head-averaged maps, no gradient tracking."""
        maps = np.asarray(maps)
        if maps.ndim == 2:
            return self.forward(maps)[0].data
        out = [self.forward(maps[i:i + batch_size])[0].data for i in range(0, len(maps), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.cfg.token_count))

    def save(self, directory) -> None:
        nk.save_checkpoint(directory, {k: v.data for k, v in self.params.items()}, self.cfg.to_dict())

    @classmethod
    def load(cls, directory) -> "Detector":
        tensors, config = nk.load_checkpoint(directory)
        if config is None:
            raise FileNotFoundError(f"{directory}/config.json")
        det = cls(DetectorConfig(**config))
        for name, arr in tensors.items():
            det.params[name].data = arr
        return det


# ---------------------------------------------------------------------- loss

def sample_positives(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For each anchor, a uniformly drawn other index with the same label (-1 if none)."""
    labels = np.asarray(labels).reshape(-1)
    pos = np.full(labels.size, -1, dtype=np.int64)
    for lab in (0, 1):
        idx = np.flatnonzero(labels == lab)
        if idx.size < 2:
            continue
        draw = rng.integers(0, idx.size - 1, size=idx.size)
        draw = draw + (draw >= np.arange(idx.size))  # skip the anchor itself
        pos[idx] = idx[draw]
    return pos


def contrastive_term(features: Tensor, labels: np.ndarray, positives: np.ndarray,
                     temperature: float = TEMPERATURE) -> Tensor | None:
    """InfoNCE over columns: anchor vs its sampled positive and every
    opposite-label column, with cosine similarity scaled by 1/temperature.

    Returns ``None`` when the batch lacks one of the two labels.
    """
    y = np.asarray(labels).reshape(-1)
    if y.min() == y.max():
        return None
    f = nk.reshape(features, (y.size, -1))
    norm = nk.sqrt(nk.sum_(f * f, axis=1, keepdims=True) + 1e-12)
    z = f / norm
    sim = nk.matmul(z, nk.transpose(z)) * (1.0 / temperature)
    anchors = np.flatnonzero(positives >= 0)
    if anchors.size == 0:
        return None
    sim = sim[anchors]
    neg = (y[anchors][:, None] != y[None, :]).astype(np.float64)
    pos_onehot = np.zeros_like(neg)
    pos_onehot[np.arange(anchors.size), positives[anchors]] = 1.0
    keep = neg + pos_onehot
    # stabilise with a constant shift; cosine/T is bounded by 1/T
    shift = 1.0 / temperature
    denom = nk.sum_(nk.exp(sim - shift) * keep, axis=1)
    s_pos = nk.sum_(sim * pos_onehot, axis=1) - shift
    return nk.mean(nk.log(denom) - s_pos)


def delta_loss(scores: Tensor, features: Tensor, labels, lam: float,
               rng: np.random.Generator | None = None, positives: np.ndarray | None = None,
               temperature: float = TEMPERATURE) -> Tensor:
    """BCE over every column plus ``lam`` times the contrastive term."""
    y = np.asarray(labels, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("column labels must be 0 or 1")
    loss = nk.binary_cross_entropy(scores, y, PROB_CLIP)
    if lam == 0:
        return loss
    if positives is None:
        positives = sample_positives(y, rng or np.random.default_rng(0))
    con = contrastive_term(features, y, positives, temperature)
    return loss if con is None else loss + con * lam


# ------------------------------------------------------------------ training

def collect_training_maps(victim, debugset) -> tuple[np.ndarray, np.ndarray]:
    """Head-averaged maps for every clean and compromised debug sample at every
    layer, with per-column labels (zeros for clean maps)."""
    from .data import GlyphSample, stack_features, stack_images

    def stack(samples):
        return stack_images(samples) if isinstance(samples[0], GlyphSample) else stack_features(samples)

    n = victim.cfg.token_count
    clean = [p.clean for p in debugset.pairs]
    comp = [p.compromised for p in debugset.pairs]
    maps, labels = [], []
    for group, is_comp in ((clean, False), (comp, True)):
        for start in range(0, len(group), 256):
            chunk = group[start:start + 256]
            _, trace = victim.forward(stack(chunk))
            lab = np.zeros((len(chunk), n))
            if is_comp:
                for i, pair in enumerate(debugset.pairs[start:start + 256]):
                    lab[i, list(pair.anomalous_columns)] = 1
            for A in trace.maps:
                maps.append(aggregate_heads(A))
                labels.append(lab)
    return np.concatenate(maps), np.concatenate(labels)


def fit_detector(det: Detector, maps: np.ndarray, labels: np.ndarray, epochs: int = 50,
                 seed: int = 0, lr: float = 1e-4, weight_decay: float = 0.01,
                 batch_size: int = 16) -> list[dict]:
    """AdamW training on labelled maps; returns per-epoch mean losses."""
    rng = np.random.default_rng(seed)
    history = []
    for p in det.params.values():
        p.requires_grad = True
    try:
        opt = nk.AdamW(det.parameters(), lr=lr, weight_decay=weight_decay)
        for epoch in range(epochs):
            order = rng.permutation(len(maps))
            total = 0.0
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                try:
                    with Tape() as tape:
                        probs, feats = det.forward(maps[idx])
                        loss = delta_loss(probs, feats, labels[idx], det.cfg.lambda_contrast, rng,
                                          temperature=det.cfg.temperature)
                    tape.backward(loss)
                except NumericError as err:
                    raise NumericError(f"detector training diverged at epoch {epoch}: {err}") from err
                opt.step()
                total += loss.item() * len(idx)
            history.append({"epoch": epoch, "loss": total / len(maps)})
            log.debug("detector epoch %d loss %.4f", epoch, history[-1]["loss"])
    finally:
        for p in det.params.values():
            p.requires_grad = False
            p.grad = None
    return history


def train_detector(debugset, victim, cfg: DetectorConfig, epochs: int = 50, seed: int = 0,
                   lr: float = 1e-4, batch_size: int = 16) -> tuple[Detector, list[dict]]:
    if len(debugset) == 0:
        raise ContractError("debugging set is empty")
    if not any(p.anomalous_columns for p in debugset.pairs):
        raise ContractError("debugging set has no compromised samples")
    if cfg.token_count != victim.cfg.token_count:
        raise ContractError("detector token count does not match the victim")
    maps, labels = collect_training_maps(victim, debugset)
    det = Detector(cfg, seed)
    history = fit_detector(det, maps, labels, epochs, seed, lr=lr, batch_size=batch_size)
    return det, history


# -------------------------------------------------------------- localisation

def localize(trace, det: Detector, tau: float | None = None) -> set[tuple[int, int]]:
    """``{(layer, column)}`` whose anomaly probability is strictly above ``tau``."""
    tau = det.cfg.tau if tau is None else tau
    maps = trace.maps if hasattr(trace, "maps") else trace
    if maps[0].shape[-1] != det.cfg.token_count:
        raise DimensionError("trace token count does not match the detector")
    flagged = set()
    for l, A in enumerate(maps):
        p = det.scores(aggregate_heads(A))
        flagged.update((l, int(j)) for j in np.flatnonzero(p > tau))
    return flagged


def threshold_scores(scores: np.ndarray, tau: float) -> set[tuple[int, int]]:
    """Localisation on precomputed ``[layers, n]`` scores."""
    scores = np.asarray(scores)
    return {(int(l), int(j)) for l, j in zip(*np.nonzero(scores > tau))}
