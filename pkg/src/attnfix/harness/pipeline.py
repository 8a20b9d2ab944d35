"""Stage-by-stage experiment pipeline with on-disk artifacts.

Every stage stores what it produces under the run directory, so the CLI can
run stages one at a time; a single ``Run`` object also keeps everything in
memory when stages are chained.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Callable

import numpy as np

from .. import data as D
from .. import numkernel as nk
from ..detector import Detector, DetectorConfig, aggregate_heads, train_detector
from ..hotpatch import BenignReference, HotFixer, build_benign_reference
from ..inversion import InversionResult, identify_target_class, to_trigger_spec
from ..numkernel import ContractError
from ..victim import VictimTransformer, train_victim, zero_column_probe
from .config import RunConfig
from .metrics import (MetricsReport, bench_latency, eval_accuracy, eval_asr, eval_detector_strict,
                      eval_uf, pr_curve, stack)

log = logging.getLogger(__name__)

PR_TAUS = tuple(np.round(np.linspace(0.05, 0.95, 19), 2))
PROBE_SAMPLES = 100


def write_jsonl(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, default=_jsonable) + "\n")


def write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(dict.fromkeys(k for row in rows for k in row))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v))


class Run:
    """One experiment rooted at ``cfg.out``."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self._cache: dict[str, object] = {}

    # ---------------------------------------------------------------- paths

    @property
    def ckpt(self) -> Path:
        return self.root / "checkpoints"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def plots(self) -> Path:
        return self.root / "plots-data"

    def _need(self, key: str, loader: Callable, path: Path, stage: str):
        if key not in self._cache:
            if not path.exists():
                raise FileNotFoundError(f"{path} is missing; run `{stage}` first")
            self._cache[key] = loader()
        return self._cache[key]

    def _samples(self, name: str, stage: str = "gen-data"):
        d = self.root / "data"
        return self._need(name, lambda: D.load_samples(d, name), d / f"{name}.json", stage)

    @property
    def train(self):
        return self._samples("train")

    @property
    def test(self):
        return self._samples("test")

    @property
    def debug_pool(self):
        return self._samples("debug_pool")

    @property
    def poisoned(self):
        return self._samples("poisoned_train", "poison")

    @property
    def victim(self) -> VictimTransformer:
        p = self.ckpt / "victim"
        return self._need("victim", lambda: VictimTransformer.load(p), p, "train-victim")

    @property
    def detector(self) -> Detector:
        p = self.ckpt / "detector"
        return self._need("detector", lambda: Detector.load(p), p, "train-detector")

    @property
    def qref(self) -> BenignReference:
        p = self.ckpt / "qref"
        return self._need("qref", lambda: BenignReference.load(p), p, "build-qref")

    @property
    def debugset(self) -> D.DebuggingSet:
        p = self.root / "debugset"
        return self._need("debugset", lambda: D.load_debugset(p), p, "build-debugset")

    @property
    def planted_trigger(self) -> D.TriggerSpec:
        c = self.cfg
        return D.corner_trigger(c.trigger_size, c.target_class, blend_alpha=c.blend_alpha)

    @property
    def inversion(self) -> dict:
        p = self.ckpt / "inversion"
        return self._need("inversion", lambda: _load_inversion(p), p, "invert-trigger")

    def _require(self, scenario: str, stage: str) -> None:
        if self.cfg.scenario != scenario:
            raise ContractError(f"`{stage}` applies to the {scenario} scenario only")

    # --------------------------------------------------------------- stages

    def gen_data(self) -> dict:
        c, s = self.cfg, self.cfg.seed
        if c.scenario == "backdoor":
            sets = {"train": D.gen_glyphs(c.n_train, s + 1, "train"),
                    "test": D.gen_glyphs(c.n_test, s + 2, "test"),
                    "debug_pool": D.gen_glyphs(c.n_debug_pool, s + 11, "debug")}
        else:
            b = c.bias_strength
            sets = {"train": D.gen_tabular_biased(c.n_train, b, s + 1, "train"),
                    "test": D.gen_tabular_biased(c.n_test, b, s + 2, "test"),
                    "debug_pool": D.gen_tabular_biased(c.n_debug_pool, b, s + 11, "debug")}
        for name, samples in sets.items():
            D.save_samples(self.root / "data", name, samples)
            self._cache[name] = samples
        return {k: len(v) for k, v in sets.items()}

    def poison(self) -> dict:
        self._require("backdoor", "poison")
        out = D.poison_dataset(self.train, self.planted_trigger, self.cfg.poison_rate, self.cfg.seed + 3)
        D.save_samples(self.root / "data", "poisoned_train", out)
        self._cache["poisoned_train"] = out
        return {"poisoned": sum(x.poisoned for x in out), "total": len(out)}

    def train_victim(self) -> dict:
        c = self.cfg
        data = self.poisoned if c.scenario == "backdoor" else self.train
        seed = c.seed if c.victim_seed is None else c.victim_seed
        model = VictimTransformer(c.model_config(), seed=seed)
        history = train_victim(model, stack(data), D.labels_of(data), c.victim_epochs, seed, lr=c.victim_lr)
        model.save(self.ckpt / "victim")
        self._cache["victim"] = model
        write_csv(self.plots / "victim_history.csv", history)
        return history[-1] if history else {"epoch": -1}

    def invert_trigger(self) -> dict:
        self._require("backdoor", "invert-trigger")
        c = self.cfg
        pool = self.debug_pool[:c.inversion_samples]
        res = identify_target_class(self.victim, D.stack_images(pool), c.inversion_lambda,
                                    c.inversion_steps, c.seed)
        _save_inversion(self.ckpt / "inversion", res)
        self._cache["inversion"] = _inversion_payload(res)
        return res.to_json()

    def trigger_for_debugging(self) -> D.TriggerSpec:
        if not self.cfg.use_inverted_trigger:
            return self.planted_trigger
        inv = self.inversion
        return to_trigger_spec(inv["mask"], inv["pattern"], inv["chosen_target"])

    def build_debugset(self) -> dict:
        c = self.cfg
        if c.scenario == "backdoor":
            ds = D.build_backdoor_debugset(self.victim, self.debug_pool, self.trigger_for_debugging(),
                                           c.debugset_size)
        else:
            ds = D.build_bias_debugset(self.victim, self.debug_pool, c.protected_values)
        D.save_debugset(self.root / "debugset", ds)
        self._cache["debugset"] = ds
        cols = sorted({col for p in ds.pairs for col in p.anomalous_columns})
        return {"pairs": len(ds), "kind": ds.kind, "anomalous_columns": cols}

    def train_detector(self) -> dict:
        c = self.cfg
        dcfg = DetectorConfig(token_count=self.victim.cfg.token_count, tau=c.tau, **c.detector)
        det, history = train_detector(self.debugset, self.victim, dcfg, c.detector_epochs, c.seed,
                                      lr=c.detector_lr, batch_size=c.detector_batch)
        det.save(self.ckpt / "detector")
        self._cache["detector"] = det
        write_csv(self.plots / "detector_history.csv", history)
        return history[-1] if history else {"epoch": -1}

    def build_qref(self) -> dict:
        ref = build_benign_reference(self.victim, stack(self.debugset.clean_pool))
        ref.save(self.ckpt / "qref")
        self._cache["qref"] = ref
        return {"sample_count": ref.sample_count, "layers": len(ref.maps)}

    def fixer(self, selector: str = "detector", rescale: bool = True, seed: int | None = None,
              mode: str | None = None) -> HotFixer:
        det = self.detector if selector == "detector" else None
        return HotFixer(self.victim, det, self.qref, self.cfg.tau, mode or self.cfg.mode,
                        selector=selector, rescale=rescale,
                        seed=self.cfg.seed if seed is None else seed)

    # ----------------------------------------------------------- evaluation

    def check_disjoint(self) -> None:
        groups = {"train": self.train, "test": self.test, "debug_pool": self.debug_pool}
        ids = {k: {x.uid for x in v} for k, v in groups.items()}
        names = list(ids)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                if ids[a] & ids[b]:
                    raise ContractError(f"{a} and {b} share samples")

    def triggered_test(self) -> list[D.GlyphSample]:
        t = self.planted_trigger
        return [D.apply_trigger(x, t) for x in self.test if x.label != t.target_class]

    def detector_eval_maps(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Balanced clean and compromised per-layer maps from the test split,
        head-averaged, with ground-truth column labels for the compromised ones."""
        v, n = self.victim, self.victim.cfg.token_count
        if self.cfg.scenario == "backdoor":
            trig = self.triggered_test()
            hit = v.predict(stack(trig)) == self.cfg.target_class
            comp = [x for x, h in zip(trig, hit) if h]
            cols = D.mask_to_columns(self.planted_trigger.mask, v.cfg.patch)
            clean = self.test
        else:
            comp, _, divergent = D.divergent_variants(v, self.test, self.cfg.protected_values)
            cols = (self.test[0].protected_index + 1,)
            clean = [x for x, d in zip(self.test, divergent) if not d]
        k = min(len(comp), len(clean))
        if k == 0:
            raise ContractError("detector evaluation needs compromised and clean test samples")
        lab = np.zeros(n)
        lab[list(cols)] = 1
        clean_maps = _layer_maps(v, stack(clean[:k]))
        comp_maps = _layer_maps(v, stack(comp[:k]))
        return clean_maps, comp_maps, np.tile(lab, (len(comp_maps), 1))

    def evaluate(self) -> MetricsReport:
        c = self.cfg
        self.check_disjoint()
        fixer = self.fixer()
        rep = MetricsReport(c.scenario)
        rep.acc_before = eval_accuracy(self.victim, self.test)
        rep.acc_after = eval_accuracy(fixer, self.test)
        if c.scenario == "backdoor":
            trig = self.triggered_test()
            rep.asr_before = eval_asr(self.victim, trig, c.target_class)
            rep.asr_after = eval_asr(fixer, trig, c.target_class)
        else:
            rep.uf_before = eval_uf(self.victim, self.test, c.protected_values)
            rep.uf_after = eval_uf(fixer, self.test, c.protected_values)
        clean_maps, comp_maps, labels = self.detector_eval_maps()
        rep.detector = eval_detector_strict(self.detector, clean_maps, comp_maps, labels, c.tau)
        rep.detector["maps_per_class"] = len(clean_maps)
        rep.validate()
        write_csv(self.plots / "pr_curve.csv", pr_curve(self.detector, clean_maps, comp_maps, labels, PR_TAUS))
        self._emit("evaluate", rep)
        return rep

    def ablate(self) -> MetricsReport:
        c = self.cfg
        rep = MetricsReport(c.scenario)
        variants = {"full": {}, "wo_det": {"selector": "random"}, "wo_rec": {"rescale": False}}
        for seed in c.seeds:
            for name, kw in variants.items():
                fixer = self.fixer(seed=seed, **kw)
                row = {"variant": name, "seed": seed, "acc": eval_accuracy(fixer, self.test)}
                if c.scenario == "backdoor":
                    row["asr"] = eval_asr(fixer, self.triggered_test(), c.target_class)
                else:
                    row["uf"] = eval_uf(fixer, self.test, c.protected_values)
                rep.ablation.append(row)
        write_csv(self.plots / "ablation.csv", rep.ablation)
        self._emit("ablate", rep)
        return rep

    def probe_zero_column(self) -> list[dict]:
        self._require("backdoor", "probe-zero-column")
        v = self.victim
        trig = stack(self.triggered_test())
        attacked = trig[v.predict(trig) == self.cfg.target_class][:PROBE_SAMPLES]
        if len(attacked) == 0:
            raise ContractError("no successfully attacked samples to probe")
        trigger_cols = set(D.mask_to_columns(self.planted_trigger.mask, v.cfg.patch))
        rows = [{"column": col, "trigger": col in trigger_cols,
                 "surviving": zero_column_probe(v, attacked, col), "samples": len(attacked)}
                for col in range(v.cfg.token_count)]
        write_csv(self.plots / "zero_column.csv", rows)
        write_jsonl(self.reports / "probe-zero-column.jsonl", rows)
        return rows

    def bench_latency(self) -> dict:
        c = self.cfg
        clean = stack(self.test)
        if c.scenario == "backdoor":
            comp = stack(self.triggered_test())
        else:
            comp = stack(D.divergent_variants(self.victim, self.test, c.protected_values)[0] or self.test)
        out = {"mode": c.mode, **bench_latency(self.victim, self.fixer(), clean, comp, c.latency_repeats)}
        write_jsonl(self.reports / "bench-latency.jsonl", [out])
        write_csv(self.plots / "latency.csv", [out])
        return out

    def run_all(self) -> MetricsReport:
        self.gen_data()
        if self.cfg.scenario == "backdoor":
            self.poison()
        self.train_victim()
        if self.cfg.scenario == "backdoor" and self.cfg.use_inverted_trigger:
            self.invert_trigger()
        self.build_debugset()
        self.train_detector()
        self.build_qref()
        return self.evaluate()

    def _emit(self, stage: str, rep: MetricsReport) -> None:
        self.reports.mkdir(parents=True, exist_ok=True)
        write_jsonl(self.reports / f"{stage}.jsonl", rep.rows())
        (self.reports / f"{stage}.json").write_text(json.dumps(rep.to_dict(), indent=2, default=_jsonable))
        write_csv(self.plots / f"{stage}.csv", rep.rows())


def _layer_maps(victim, x: np.ndarray) -> np.ndarray:
    _, trace = victim.forward(x)
    return np.concatenate([aggregate_heads(A) for A in trace.maps])


def _inversion_payload(res: InversionResult) -> dict:
    inv = res.per_class[res.chosen_target]
    return {"mask": inv.mask, "pattern": inv.pattern, "chosen_target": res.chosen_target,
            "low_confidence": res.low_confidence}


def _save_inversion(directory: Path, res: InversionResult) -> None:
    tensors = {}
    for c, r in res.per_class.items():
        tensors[f"mask{c}"] = r.mask
        tensors[f"pattern{c}"] = r.pattern
    nk.save_checkpoint(directory, tensors, res.to_json())


def _load_inversion(directory: Path) -> dict:
    tensors, meta = nk.load_checkpoint(directory)
    c = meta["chosen_target"]
    return {"mask": tensors[f"mask{c}"], "pattern": tensors[f"pattern{c}"], "chosen_target": c,
            "low_confidence": meta["low_confidence"]}
