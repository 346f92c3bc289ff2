"""Experiment configuration: nested sections loaded from YAML or JSON, with
``section.key=value`` overrides and a canonical hash that names the run."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adversary import HEADS, SUT_MODES
from .errors import DomainError, FormatError, IoError

OUTPUT_ENV = "FEDUNLEARN_OUTPUT_DIR"


@dataclass
class DatasetSpec:
    source: str = "synth"  # synth | movielens
    ratings_path: str | None = None
    users_path: str | None = None
    fmt: str = "tab"  # tab (ML-100K) | double-colon (ML-1M)
    kcore: list[int] = field(default_factory=lambda: [5, 5])
    age_thresholds: list[int] = field(default_factory=lambda: [27, 38])
    balance: bool = True
    attribute: str = "gender"
    n_users: int = 200
    n_items: int = 300
    signal: float = 1.0


@dataclass
class ModelSpec:
    dim: int = 32
    lr: float = 0.1
    rounds: int = 800
    fraction: float = 0.1
    negatives: int = 4
    local_epochs: int = 1
    batch_size: int | None = None
    scorer: str = "dot"


@dataclass
class AdversarySpec:
    head: str = "dsvae"  # plain | vae | dsvae | none (no adversary)
    lambda_adv: float = 1.0
    lam: float = 4.0  # "lambda" in config files
    lr: float = 0.1
    hidden: int = 100
    pretrain_epochs: int = 0


@dataclass
class SutSpec:
    mode: str = "binary"
    eps: float = 400.0
    tau: float = 1.0


@dataclass
class AttackSpec:
    shadow_fraction: float = 0.2
    hidden: int = 100
    epochs: int = 300
    lr: float = 0.01
    repeats: int = 1  # shadow splits averaged into F1 / BAcc
    gradient: str = "dlg"  # dlg | idlg | none
    dlg_steps: int = 300
    dlg_lr: float = 0.05
    dlg_restarts: int = 4
    dlg_optimizer: str = "lbfgs"
    round: int | None = None  # attack the store as it stood after this round; None: after training


@dataclass
class RunSpec:
    seed: int = 0
    output_dir: str | None = None
    repeats: int = 1
    eval_candidates: int | None = None  # None: rank against every non-interacted item
    workers: int = 0


SECTIONS = {
    "dataset": DatasetSpec,
    "model": ModelSpec,
    "adversary": AdversarySpec,
    "sut": SutSpec,
    "attack": AttackSpec,
    "run": RunSpec,
}
# keys whose names are not valid Python identifiers
ALIASES = {("adversary", "lambda"): "lam"}
_REVERSE = {(s, f): k for (s, k), f in ALIASES.items()}


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    adversary: AdversarySpec = field(default_factory=AdversarySpec)
    sut: SutSpec = field(default_factory=SutSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    run: RunSpec = field(default_factory=RunSpec)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        d, m, a, s, k, r = self.dataset, self.model, self.adversary, self.sut, self.attack, self.run
        checks = [
            (d.source in ("synth", "movielens"), "dataset.source must be synth or movielens"),
            (d.source != "movielens" or (d.ratings_path and d.users_path), "movielens needs ratings_path and users_path"),
            (0.0 <= d.signal <= 1.0, "dataset.signal must be in [0, 1]"),
            (d.attribute in ("gender", "age"), "dataset.attribute must be gender or age"),
            (m.dim > 0 and m.lr > 0 and m.rounds >= 0, "model.dim, model.lr must be positive and rounds >= 0"),
            (0.0 < m.fraction <= 1.0, "model.fraction must be in (0, 1]"),
            (m.negatives >= 1 and m.local_epochs >= 1, "model.negatives and model.local_epochs must be >= 1"),
            (m.batch_size is None or m.batch_size >= 1, "model.batch_size must be >= 1"),
            (m.scorer in ("dot", "mlp"), "model.scorer must be dot or mlp"),
            (a.head in HEADS + ("none",), f"adversary.head must be one of {HEADS + ('none',)}"),
            (a.lambda_adv >= 0 and a.lam >= 0, "adversary weights must be >= 0"),
            (a.lr > 0 and a.hidden >= 1 and a.pretrain_epochs >= 0, "bad adversary lr/hidden/pretrain_epochs"),
            (s.mode in SUT_MODES, f"sut.mode must be one of {SUT_MODES}"),
            (s.eps >= 0 and s.tau > 0, "sut.eps must be >= 0 and sut.tau > 0"),
            (0.0 < k.shadow_fraction < 1.0, "attack.shadow_fraction must be in (0, 1)"),
            (k.gradient in ("dlg", "idlg", "none"), "attack.gradient must be dlg, idlg or none"),
            (k.repeats >= 1 and r.repeats >= 1, "repeat counts must be >= 1"),
            (k.round is None or 1 <= k.round <= m.rounds, "attack.round must lie in [1, model.rounds]"),
            (r.eval_candidates is None or r.eval_candidates >= 1, "run.eval_candidates must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise DomainError(msg)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {_REVERSE.get((name, k), k): v for k, v in sec.items()}
        return out

    def config_hash(self) -> str:
        """sha256 over the canonical JSON form, ignoring where outputs go."""
        doc = self.to_dict()
        doc["run"].pop("output_dir", None)
        doc["run"].pop("workers", None)
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def run_id(self) -> str:
        return self.config_hash()[:12]

    def output_dir(self) -> Path:
        base = os.environ.get(OUTPUT_ENV) or self.run.output_dir or "runs"
        return Path(base)

    @classmethod
    def from_dict(cls, doc: dict | None) -> "ExperimentConfig":
        doc = doc or {}
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise FormatError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, spec in SECTIONS.items():
            sec = doc.get(name) or {}
            if not isinstance(sec, dict):
                raise FormatError(f"section {name!r} must be a mapping")
            names = {f.name for f in dataclasses.fields(spec)}
            kwargs = {}
            for k, v in sec.items():
                key = ALIASES.get((name, k), k)
                if key not in names:
                    raise FormatError(f"unknown key {name}.{k}")
                kwargs[key] = v
            parts[name] = spec(**kwargs)
        return cls(**parts)

    def with_overrides(self, overrides) -> "ExperimentConfig":
        doc = self.to_dict()
        for item in overrides:
            apply_override(doc, item)
        return ExperimentConfig.from_dict(doc)


def apply_override(doc: dict, item: str) -> None:
    """Apply ``section.key=value`` in place; the value is parsed as YAML."""
    if "=" not in item:
        raise FormatError(f"override {item!r} is not section.key=value")
    path, raw = item.split("=", 1)
    if path.count(".") != 1:
        raise FormatError(f"override key {path!r} is not section.key")
    section, key = path.split(".")
    if section not in SECTIONS:
        raise FormatError(f"unknown config section {section!r}")
    doc.setdefault(section, {})[key] = yaml.safe_load(raw) if raw else None


def load_config(path=None, overrides=()) -> ExperimentConfig:
    doc = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = yaml.safe_load(text) or {}  # JSON is a YAML subset
        except yaml.YAMLError as exc:
            raise FormatError(f"config {path} is not valid YAML/JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise FormatError("config root must be a mapping")
    for item in overrides:
        apply_override(doc, item)
    return ExperimentConfig.from_dict(doc)
