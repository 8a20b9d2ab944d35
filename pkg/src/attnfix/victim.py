"""Small pre-norm transformer encoder whose attention maps can be observed and
replaced mid-inference.

Every attention layer passes its freshly computed map ``A`` (``[batch, heads,
n, n]``) to an optional hook. Returning ``None`` lets the computed map through
untouched; returning an array makes the layer use that array for the ``A @ V``
aggregation instead.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import numkernel as nk
from .numkernel import ContractError, DimensionError, NumericError, Tape, Tensor

log = logging.getLogger(__name__)

# hook(layer, maps[b, h, n, n]) -> replacement maps or None
AttentionHook = Callable[[int, np.ndarray], Optional[np.ndarray]]

OVERRIDE_ROW_TOL = 1e-5


@dataclass
class ModelConfig:
    modality: str = "image"
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    mlp_ratio: int = 2
    n_classes: int = 4
    side: int = 16
    patch: int = 4
    n_features: int = 6
    vocab_sizes: list[int] = field(default_factory=lambda: [2, 4, 4, 4, 4, 4])

    def __post_init__(self):
        if self.modality not in ("image", "tabular"):
            raise ContractError(f"unknown modality {self.modality!r}")
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.modality == "image" and self.side % self.patch:
            raise ContractError("image side must be divisible by patch size")
        if self.modality == "tabular" and len(self.vocab_sizes) != self.n_features:
            raise ContractError("need one vocab size per tabular feature")

    @property
    def token_count(self) -> int:
        if self.modality == "image":
            return (self.side // self.patch) ** 2 + 1
        return self.n_features + 1

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class AttentionTrace:
    """Per-layer maps actually used during one forward pass."""

    maps: list[np.ndarray]

    @property
    def token_count(self) -> int:
        return self.maps[0].shape[-1]

    def sample(self, i: int) -> "AttentionTrace":
        return AttentionTrace([m[i] for m in self.maps])


def _check_override(override: np.ndarray, expected: tuple[int, ...], layer: int,
                    check_rows: bool = True) -> np.ndarray:
    override = np.asarray(override, dtype=np.float64)
    if override.shape != expected:
        raise DimensionError(f"override for layer {layer} has shape {override.shape}, "
                             f"expected {expected}")
    dev = np.abs(override.sum(axis=-1) - 1.0).max()
    if check_rows and dev > OVERRIDE_ROW_TOL:
        raise ContractError(f"override rows for layer {layer} deviate from 1 by {dev:.3g}")
    return override


class VictimTransformer:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d, n = cfg.d_model, cfg.token_count

        def add(name, arr):
            self.params[name] = Tensor(arr, name=name)

        def dense(name, fan_in, fan_out):
            add(name + ".w", rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, fan_out)))
            add(name + ".b", np.zeros(fan_out))

        if cfg.modality == "image":
            dense("embed", cfg.patch * cfg.patch, d)
        else:
            add("embed.table", rng.normal(0, 1.0, (sum(cfg.vocab_sizes), d)))
        add("cls", rng.normal(0, 0.02, (1, 1, d)))
        add("pos", rng.normal(0, 0.02, (1, n, d)))
        for l in range(cfg.n_layers):
            p = f"layer{l}."
            add(p + "ln1.g", np.ones(d)); add(p + "ln1.b", np.zeros(d))
            for proj in ("q", "k", "v", "o"):
                dense(p + proj, d, d)
            add(p + "ln2.g", np.ones(d)); add(p + "ln2.b", np.zeros(d))
            dense(p + "mlp1", d, d * cfg.mlp_ratio)
            dense(p + "mlp2", d * cfg.mlp_ratio, d)
        add("lnf.g", np.ones(d)); add("lnf.b", np.zeros(d))
        dense("head", d, cfg.n_classes)

    # ------------------------------------------------------------ parameters

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @contextlib.contextmanager
    def trainable(self):
        for p in self.params.values():
            p.requires_grad = True
        try:
            yield self.parameters()
        finally:
            for p in self.params.values():
                p.requires_grad = False
                p.grad = None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def save(self, directory) -> None:
        nk.save_checkpoint(directory, {k: v.data for k, v in self.params.items()},
                           self.cfg.to_dict())

    @classmethod
    def load(cls, directory) -> "VictimTransformer":
        tensors, config = nk.load_checkpoint(directory)
        if config is None:
            raise FileNotFoundError(str(Path(directory) / "config.json"))
        model = cls(ModelConfig.from_dict(config))
        for name, arr in tensors.items():
            if name not in model.params or model.params[name].shape != arr.shape:
                raise ContractError(f"checkpoint tensor {name} does not fit the config")
            model.params[name].data = arr
        return model

    # -------------------------------------------------------------- forward

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _dense(self, x: Tensor, name: str) -> Tensor:
        return nk.matmul(x, self._p(name + ".w")) + self._p(name + ".b")

    def tokenize(self, x) -> Tensor:
        """Embed a batch of raw inputs into ``[batch, n, d_model]`` tokens, CLS first.

        Images are ``[batch, 1, side, side]`` (a Tensor when gradients w.r.t.
        the input are wanted); tabular inputs are integer ids ``[batch, n_features]``.
        """
        cfg = self.cfg
        if cfg.modality == "image":
            x = x if isinstance(x, Tensor) else Tensor(x)
            if x.ndim != 4 or x.shape[1:] != (1, cfg.side, cfg.side):
                raise DimensionError(f"expected images [b, 1, {cfg.side}, {cfg.side}], got {x.shape}")
            b, g, p = x.shape[0], cfg.side // cfg.patch, cfg.patch
            patches = x.reshape(b, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(b, g * g, p * p)
            body = self._dense(patches, "embed")
        else:
            ids = np.asarray(x, dtype=np.int64)
            if ids.ndim != 2 or ids.shape[1] != cfg.n_features:
                raise DimensionError(f"expected [b, {cfg.n_features}] feature ids, got {ids.shape}")
            vocab = np.asarray(cfg.vocab_sizes)
            if np.any(ids < 0) or np.any(ids >= vocab):
                raise IndexError("feature id outside its vocabulary")
            offsets = np.concatenate([[0], np.cumsum(vocab)[:-1]])
            body = nk.embedding(self._p("embed.table"), ids + offsets)
            b = ids.shape[0]
        cls = nk.broadcast_to(self._p("cls"), (b, 1, cfg.d_model))
        return nk.concat([cls, body], axis=1) + self._p("pos")

    def self_attention(self, h: Tensor, layer: int, hook: AttentionHook | None = None,
                       check_rows: bool = True):
        """Multi-head attention on normed tokens ``h``.

        Returns ``(context, used_map)`` where ``context`` is the head outputs
        merged back to ``[b, n, d]`` before the output projection.
        """
        cfg = self.cfg
        b, n, _ = h.shape
        H, dk = cfg.n_heads, cfg.head_dim
        pre = f"layer{layer}."

        def heads(t):
            return t.reshape(b, n, H, dk).transpose(0, 2, 1, 3)

        q = heads(self._dense(h, pre + "q"))
        k = heads(self._dense(h, pre + "k"))
        v = heads(self._dense(h, pre + "v"))
        A = nk.softmax_rows(nk.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk)))
        if hook is not None:
            repl = hook(layer, A.data)
            if repl is not None:
                A = Tensor._wrap(_check_override(repl, A.shape, layer, check_rows))
        ctx = nk.matmul(A, v).transpose(0, 2, 1, 3).reshape(b, n, cfg.d_model)
        return ctx, A

    def block_forward(self, tokens: Tensor, layer: int, hook: AttentionHook | None = None,
                      check_rows: bool = True):
        pre = f"layer{layer}."
        h = nk.layer_norm(tokens, self._p(pre + "ln1.g"), self._p(pre + "ln1.b"))
        ctx, A = self.self_attention(h, layer, hook, check_rows)
        x = tokens + self._dense(ctx, pre + "o")
        h2 = nk.layer_norm(x, self._p(pre + "ln2.g"), self._p(pre + "ln2.b"))
        x = x + self._dense(nk.gelu(self._dense(h2, pre + "mlp1")), pre + "mlp2")
        return x, A

    def attention_layer_forward(self, tokens: Tensor, layer: int, override=None):
        """Run one encoder block; ``override`` ([b, h, n, n]) replaces the map."""
        if layer < 0 or layer >= self.cfg.n_layers:
            raise IndexError(f"layer {layer} out of range")
        hook = None if override is None else (lambda l, A: override)
        return self.block_forward(tokens, layer, hook)

    def forward(self, x, hook: AttentionHook | None = None,
                check_rows: bool = True) -> tuple[Tensor, AttentionTrace]:
        """Batched forward; returns logits ``[b, n_classes]`` and the trace.

        ``check_rows=False`` admits replacement maps whose rows do not sum to
        one (used only by the no-rescale ablation).
        """
        t = self.tokenize(x)
        maps = []
        for l in range(self.cfg.n_layers):
            t, A = self.block_forward(t, l, hook, check_rows)
            maps.append(A.data)
        t = nk.layer_norm(t, self._p("lnf.g"), self._p("lnf.b"))
        cls = t[:, 0, :]
        return self._dense(cls, "head"), AttentionTrace(maps)

    def logits(self, x) -> np.ndarray:
        return self.forward(x)[0].data

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        x = x if isinstance(x, np.ndarray) else np.asarray(x)
        out = [self.logits(x[i:i + batch_size]).argmax(axis=-1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def forward_collect(self, x, overrides: dict[int, np.ndarray] | None = None):
        """Forward a single raw sample with optional per-layer replacement maps.

        ``overrides`` maps layer index to a ``[heads, n, n]`` map. Returns
        ``(logits[n_classes], trace)`` where the trace holds the maps used.
        """
        batch = np.asarray(x)[None]
        hook = None
        if overrides:
            def hook(l, A):
                o = overrides.get(l)
                return None if o is None else np.asarray(o)[None]
        logits, trace = self.forward(batch, hook)
        return logits.data[0], trace.sample(0)


def train_victim(model: VictimTransformer, inputs: np.ndarray, labels: np.ndarray, epochs: int,
                 seed: int, lr: float = 2e-3, weight_decay: float = 0.01,
                 batch_size: int = 64) -> list[dict]:
    """Cross-entropy training with AdamW; returns one log row per epoch."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    history = []
    step = 0
    with model.trainable() as params:
        opt = nk.AdamW(params, lr=lr, weight_decay=weight_decay)
        for epoch in range(epochs):
            order = rng.permutation(len(labels))
            total, correct = 0.0, 0
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                try:
                    with Tape() as tape:
                        logits, _ = model.forward(inputs[idx])
                        loss = nk.cross_entropy(logits, labels[idx])
                    tape.backward(loss)
                except NumericError as err:
                    raise NumericError(f"victim training diverged at epoch {epoch}, step {step} "
                                       f"(lr={lr}): {err}") from err
                opt.step()
                step += 1
                total += loss.item() * len(idx)
                correct += int((logits.data.argmax(-1) == labels[idx]).sum())
            row = {"epoch": epoch, "loss": total / len(labels), "train_acc": correct / len(labels)}
            history.append(row)
            log.debug("victim epoch %d loss %.4f acc %.3f", epoch, row["loss"], row["train_acc"])
    return history


def zero_column_hook(column: int) -> AttentionHook:
    def hook(layer, A):
        out = A.copy()
        out[..., column] = 0.0
        s = out.sum(axis=-1, keepdims=True)
        n = A.shape[-1]
        fallback = np.full(n, 1.0 / (n - 1))
        fallback[column] = 0.0
        return np.where(s > 0, out / np.where(s > 0, s, 1.0), fallback)
    return hook


def zero_column_probe(model: VictimTransformer, samples: np.ndarray, column: int) -> float:
    """Fraction of samples whose prediction survives zeroing one attention column
    in every layer (rows renormalised)."""
    n = model.cfg.token_count
    if not 0 <= column < n:
        raise IndexError(f"column {column} outside [0, {n})")
    before = model.logits(samples).argmax(-1)
    after = model.forward(samples, zero_column_hook(column))[0].data.argmax(-1)
    return float(np.mean(before == after))


def config_json(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
