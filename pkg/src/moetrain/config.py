"""Experiment configuration: a versioned JSON document.

Top-level keys: ``schema_version``, ``seed``, ``out_dir`` and the sections
``task``, ``model``, ``train``, ``spike``, ``edit``, ``sim``, ``fit`` and
``cost``. Every section is optional in a file; missing keys take the
defaults below. Unknown keys are rejected.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import RejectedInputError
from .moe import MoEConfig

SCHEMA_VERSION = 1


@dataclass
class TaskSpec:
    kind: str = "regression"  # or "classification"
    n_samples: int = 4096
    n_eval: int = 256
    tokens_per_batch: int = 32
    input_std: float = 1.0
    target_noise: float = 0.0


@dataclass
class TrainSpec:
    total_steps: int = 500
    lr_kind: str = "wsd"
    max_lr: float = 1e-2
    warmup_steps: int = 50
    halve_fraction: float = 0.6
    anneal_start: float = 1.2e-4
    anneal_end: float = 1.2e-8
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    lambda_bal: float = 0.015
    lambda_z: float = 1e-4
    batch_initial: int = 0  # 0 disables batch-size warmup
    batch_maximum: int = 0
    batch_boundaries: list = field(default_factory=list)
    eval_every: int = 10


@dataclass
class SpikeSpec:
    enabled: bool = True
    window: int = 64
    narrow_k: float = 4.0
    wide_run_len: int = 3
    wide_k: float = 50.0
    min_history: int = 8
    backoff: float = 0.5
    retry_horizon: int = 50
    poison_step: int | None = None
    poison_scale: float = 100.0
    poison_worker: int = 0


@dataclass
class EditSpec:
    n_workers: int = 4
    policy: str = "every_H_steps"
    H: int = 4
    tau: float = 0.0
    rounds: int = 0  # time policy only
    penalty: bool = True
    ema_decay: float = 0.9
    anomaly_multiplier: float = 3.0
    clip_threshold: float = 1.0
    epsilon: float = 1e-8
    # must outlast the lr warmup: rising norms would otherwise lock healthy workers out
    penalty_warmup_rounds: int = 15
    weighting: str = "inverse"
    outer_lr: float = 1.0
    outer_momentum: float = 0.0
    step_times: list = field(default_factory=list)  # per-worker base step time for the time policy
    corrupt: dict = field(default_factory=dict)  # worker -> [start_round, factor]
    absent: dict = field(default_factory=dict)  # worker -> start_round


@dataclass
class SimSpec:
    n_workers: int = 8
    base_step_time: float = 1.0
    straggle_probability: float = 0.1
    straggle_multiplier: float = 2.0
    slowdowns: list = field(default_factory=list)
    total_steps: int = 2000
    tau: float = 8.0
    rounds: int = 250
    comm_time: float = 0.0
    layer_compute: list = field(default_factory=list)
    layer_comm: list = field(default_factory=list)
    sweep: list = field(default_factory=lambda: [1.0, 1.5, 2.0, 3.0, 4.0])


@dataclass
class FitSpec:
    csv: str | None = None
    accounting: str = "activated"
    noise: float = 0.05
    n_points: int = 8


@dataclass
class CostSpec:
    config_a: list = field(default_factory=lambda: [{"device": "D", "count": 1000, "hours": 231.0}])
    config_b: list = field(default_factory=lambda: [{"total": 5.08e6}])
    devices: dict = field(default_factory=dict)


SECTIONS = {
    "task": TaskSpec,
    "spike": SpikeSpec,
    "train": TrainSpec,
    "edit": EditSpec,
    "sim": SimSpec,
    "fit": FitSpec,
    "cost": CostSpec,
}


def _default_model() -> MoEConfig:
    return MoEConfig(d_model=16, n_experts=8, k_top=2, d_expert_hidden=8, shared_expert=True,
                     d_shared_hidden=16, vocab=16, warmup_horizon=50)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    task: TaskSpec = field(default_factory=TaskSpec)
    model: MoEConfig = field(default_factory=_default_model)
    train: TrainSpec = field(default_factory=TrainSpec)
    spike: SpikeSpec = field(default_factory=SpikeSpec)
    edit: EditSpec = field(default_factory=EditSpec)
    sim: SimSpec = field(default_factory=SimSpec)
    fit: FitSpec = field(default_factory=FitSpec)
    cost: CostSpec = field(default_factory=CostSpec)

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION, "seed": self.seed, "out_dir": self.out_dir}
        for name in SECTIONS:
            d[name] = asdict(getattr(self, name))
        d["model"] = self.model.to_dict()
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise RejectedInputError(f"unsupported schema_version {version}")
        known = {"seed", "out_dir", "model", *SECTIONS}
        unknown = set(d) - known
        if unknown:
            raise RejectedInputError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        if "out_dir" in d:
            kw["out_dir"] = str(d["out_dir"])
        for name, typ in SECTIONS.items():
            if name in d:
                kw[name] = _build(typ, d[name], name)
        if "model" in d:
            base = _default_model().to_dict()
            extra = set(d["model"]) - set(base)
            if extra:
                raise RejectedInputError(f"unknown keys in model: {sorted(extra)}")
            kw["model"] = MoEConfig.from_dict(base | d["model"])
        return cls(**kw)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.loads(f.read())


def _build(typ, values: dict, section: str):
    names = {f.name for f in fields(typ)}
    extra = set(values) - names
    if extra:
        raise RejectedInputError(f"unknown keys in {section}: {sorted(extra)}")
    return typ(**values)
