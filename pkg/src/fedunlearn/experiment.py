"""End-to-end pipeline: data -> federated training -> attacks -> metrics,
with on-disk artifacts (manifest, metrics CSV, gradient store, checkpoints)."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import adversary as adv
from . import attacks, data, metrics
from .config import ExperimentConfig
from .errors import FedUnlearnError, StateError
from .fedsim import ClientState, FedConfig, GlobalState, RecordStore, Simulation
from .numkernel import RngStream
from .recmodel import init_scorer, load_checkpoint, save_checkpoint, xavier_init

log = logging.getLogger(__name__)

KS = (5, 10, 15, 20)
CSV_COLUMNS = (
    ["run_id", "seed", "head", "sut_mode", "lambda"]
    + [f"hr{k}" for k in KS]
    + [f"ndcg{k}" for k in KS]
    + ["f1", "bacc", "grad_attack_acc", "skip_rate_mean"]
)


@dataclass
class MetricReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    f1: float
    bacc: float
    grad_attack_acc: float | None = None
    skip_rates: list[float] = field(default_factory=list)

    def __post_init__(self):
        values = list(self.hr.values()) + list(self.ndcg.values()) + [self.f1, self.bacc]
        values += [] if self.grad_attack_acc is None else [self.grad_attack_acc]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise StateError("metric outside [0, 1]")

    @property
    def skip_rate_mean(self) -> float | None:
        return float(np.mean(self.skip_rates)) if self.skip_rates else None

    def to_dict(self) -> dict:
        out = {f"hr{k}": v for k, v in self.hr.items()}
        out.update({f"ndcg{k}": v for k, v in self.ndcg.items()})
        out.update(f1=self.f1, bacc=self.bacc, grad_attack_acc=self.grad_attack_acc,
                   skip_rate_mean=self.skip_rate_mean)
        return out

    @classmethod
    def mean(cls, reports: list["MetricReport"]) -> "MetricReport":
        if len(reports) == 1:
            return reports[0]

        def avg(vals):
            vals = [v for v in vals if v is not None]
            return float(np.mean(vals)) if vals else None

        n = min(len(r.skip_rates) for r in reports)
        return cls(
            {k: avg(r.hr[k] for r in reports) for k in KS},
            {k: avg(r.ndcg[k] for r in reports) for k in KS},
            avg(r.f1 for r in reports),
            avg(r.bacc for r in reports),
            avg(r.grad_attack_acc for r in reports),
            [float(np.mean([r.skip_rates[t] for r in reports])) for t in range(n)],
        )


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_row(cfg: ExperimentConfig, seed: int, report: MetricReport) -> dict:
    row = {
        "run_id": cfg.run_id(),
        "seed": seed,
        "head": cfg.adversary.head,
        "sut_mode": cfg.sut.mode if cfg.adversary.head != "none" else "",
        "lambda": cfg.adversary.lam if cfg.adversary.head == "dsvae" else 0.0,
    }
    row.update(report.to_dict())
    return row


def write_csv(path, rows) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in CSV_COLUMNS})
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# --------------------------------------------------------------------------
# pipeline stages


def load_dataset(cfg: ExperimentConfig, seed: int) -> data.Dataset:
    d = cfg.dataset
    if d.source == "synth":
        ds = data.synth_generate(d.n_users, d.n_items, d.signal, RngStream(seed, ("data",)))
        return data.leave_one_out_split(ds)
    return data.prepare_movielens(
        d.ratings_path, d.users_path, d.fmt, tuple(d.kcore), tuple(d.age_thresholds),
        RngStream(seed, ("balance",)), d.balance,
    )


@dataclass
class Indexed:
    """Dataset ids mapped to contiguous row indices (sorted id order)."""

    users: list[int]
    items: list[int]
    train: dict[int, np.ndarray]
    test: dict[int, int]
    labels: dict[int, int]
    n_classes: int

    @classmethod
    def build(cls, ds: data.Dataset, attribute: str) -> "Indexed":
        users = sorted(ds.users)
        items = sorted(set(ds.items) | {i for i in ds.test_holdout.values()})
        item_idx = {i: k for k, i in enumerate(items)}
        per_user = ds.user_items()
        train = {u: np.array(sorted(item_idx[i] for i in per_user.get(users[u], [])), dtype=np.int64)
                 for u in range(len(users))}
        test = {u: item_idx[ds.test_holdout[uid]] for u, uid in enumerate(users) if uid in ds.test_holdout}
        labels = {u: ds.attributes[uid].label(attribute) for u, uid in enumerate(users)}
        n_classes = 2 if attribute == "gender" else 3
        return cls(users, items, train, test, labels, n_classes)


def fed_config(cfg: ExperimentConfig) -> FedConfig:
    m, a, s = cfg.model, cfg.adversary, cfg.sut
    return FedConfig(
        lr=m.lr, lr_adv=a.lr, negatives=m.negatives, fraction=m.fraction, local_epochs=m.local_epochs,
        batch_size=m.batch_size, adv_weight=a.lambda_adv, sut=adv.SutConfig(s.mode, s.eps, s.tau),
        pretrain_rounds=a.pretrain_epochs,
    )


def build_simulation(cfg: ExperimentConfig, idx: Indexed, seed: int) -> Simulation:
    root = RngStream(seed, ("train",))
    dim = cfg.model.dim
    init = root.derive("init")
    items = xavier_init((len(idx.items), dim), init.derive("items"))
    user_emb = xavier_init((len(idx.users), dim), init.derive("users"))
    scorer = init_scorer(cfg.model.scorer, dim, init.derive("scorer"))
    adversary = None
    if cfg.adversary.head != "none":
        adversary = adv.init_adversary(dim, idx.n_classes, cfg.adversary.head, init.derive("adversary"),
                                       cfg.adversary.hidden, cfg.adversary.lam)
    clients = {u: ClientState(u, user_emb[u].copy(), idx.labels[u], idx.train[u]) for u in range(len(idx.users))}
    return Simulation(GlobalState(items, scorer, adversary), clients, fed_config(cfg), root.derive("rounds"))


def rank_users(sim: Simulation, idx: Indexed, candidates: int | None, seed: int) -> list[int]:
    rng = RngStream(seed, ("eval",))
    ranks = []
    for u in sorted(idx.test):
        c = sim.clients[u]
        ranks.append(metrics.rank_test_item(c.em_u, sim.state.items, sim.state.scorer, c.train_items,
                                            idx.test[u], candidates, rng.derive(u) if candidates else None))
    return ranks


def attribute_attack(cfg: ExperimentConfig, embeddings: dict, labels: dict, n_classes: int, seed: int):
    """Mean micro-F1 and BAcc of the MLP attacker over ``attack.repeats`` shadow splits."""
    k = cfg.attack
    f1s, baccs = [], []
    for rep in range(k.repeats):
        attacker, split = attacks.train_attribute_attacker(
            embeddings, labels, k.shadow_fraction, RngStream(seed, ("attacker", rep)),
            hidden=k.hidden, epochs=k.epochs, lr=k.lr, n_classes=n_classes,
        )
        held = {u: embeddings[u] for u in split.evaluation}
        preds = attacks.infer_attributes(attacker, held)
        pred = [preds[u] for u in split.evaluation]
        true = [labels[u] for u in split.evaluation]
        f1s.append(metrics.f1_micro(pred, true))
        baccs.append(metrics.bacc(pred, true))
    return float(np.mean(f1s)), float(np.mean(baccs))


def dlg_config(cfg: ExperimentConfig, seed: int) -> attacks.DlgConfig:
    k = cfg.attack
    return attacks.DlgConfig(steps=k.dlg_steps, lr=k.dlg_lr, seed=seed, optimizer=k.dlg_optimizer,
                             restarts=k.dlg_restarts)


def gradient_attack(cfg: ExperimentConfig, store: RecordStore, seed: int) -> float | None:
    if cfg.adversary.head == "none" or cfg.attack.gradient == "none" or not store.latest:
        return None
    res = attacks.attack_store(store, dlg_config(cfg, seed), cfg.attack.gradient, seed)
    return res["accuracy"]


def evaluate(cfg: ExperimentConfig, sim: Simulation, idx: Indexed, seed: int) -> MetricReport:
    ranks = rank_users(sim, idx, cfg.run.eval_candidates, seed)
    f1, bacc = attribute_attack(cfg, sim.embeddings(), idx.labels, idx.n_classes, seed)
    skips = [lg.skip_rate for lg in sim.logs if lg.skip_rate is not None]
    return MetricReport(
        {k: metrics.hr_at_k(ranks, k) for k in KS},
        {k: metrics.ndcg_at_k(ranks, k) for k in KS},
        f1, bacc, gradient_attack(cfg, sim.attack_store or sim.store, seed), skips,
    )


# --------------------------------------------------------------------------
# artifacts


def save_run(path: Path, sim: Simulation, ds: data.Dataset) -> None:
    path.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path / "checkpoint.npz", sim.state.arrays(),
                    {"round": sim.state.round, "scorer": sim.state.scorer.variant,
                     "head": sim.state.adversary.head if sim.state.adversary else None,
                     "lam": sim.state.adversary.lam if sim.state.adversary else None})
    emb = sim.embeddings()
    save_checkpoint(path / "clients.npz", {"users": np.array([emb[u] for u in sorted(emb)])}, {})
    sim.store.write(path / "gradients.jsonl", path / "snapshots.npz")
    (path / "dataset.json").write_text(ds.to_json(), encoding="utf-8")


def load_run(cfg: ExperimentConfig, path: Path):
    """Rebuild the evaluated state of a saved run: (Simulation, Indexed)."""
    ds = data.Dataset.from_json((path / "dataset.json").read_text(encoding="utf-8"))
    idx = Indexed.build(ds, cfg.dataset.attribute)
    arrays, meta = load_checkpoint(path / "checkpoint.npz")
    sim = build_simulation(cfg, idx, 0)
    scorer = sim.state.scorer.with_arrays({k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("scorer/")})
    adversary = None
    if sim.state.adversary is not None:
        adversary = sim.state.adversary.with_arrays(
            {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adversary/")})
    sim.state = GlobalState(arrays["items"], scorer, adversary, meta["round"])
    users, _ = load_checkpoint(path / "clients.npz")
    for u, c in sim.clients.items():
        c.em_u = users["users"][u]
    if (path / "gradients.jsonl").exists():
        sim.store = RecordStore.read(path / "gradients.jsonl", path / "snapshots.npz")
    return sim, idx


def run_dir(cfg: ExperimentConfig) -> Path:
    return cfg.output_dir() / cfg.run_id()


@dataclass
class ExperimentResult:
    report: MetricReport  # mean over repeats
    reports: list[MetricReport]
    seeds: list[int]
    path: Path
    manifest: dict


def run_experiment(cfg: ExperimentConfig, out_dir=None, save: bool = True) -> ExperimentResult:
    """Run ``run.repeats`` seeds of the full pipeline and write the artifacts.

    Files (under ``out_dir``, default ``<output>/<run_id>``): ``manifest.json``,
    ``metrics.csv``, ``config.yaml`` and per seed ``seed<k>/`` with the
    checkpoint, client embeddings, gradient store and dataset. On failure the
    manifest records the stage and error before the exception propagates.
    """
    path = Path(out_dir) if out_dir is not None else run_dir(cfg)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"run_id": cfg.run_id(), "config_hash": cfg.config_hash(), "config": cfg.to_dict(),
                "runs": [], "status": "running", "failure": None}
    (path / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    executor = ThreadPoolExecutor(cfg.run.workers) if cfg.run.workers > 0 else None
    seeds = [cfg.run.seed + r for r in range(cfg.run.repeats)]
    reports, rows = [], []
    stage = "setup"
    try:
        for seed in seeds:
            entry = {"seed": seed, "rounds": 0, "round_logs": []}
            manifest["runs"].append(entry)
            stage = "data"
            ds = load_dataset(cfg, seed)
            idx = Indexed.build(ds, cfg.dataset.attribute)
            stage = "train"
            sim = build_simulation(cfg, idx, seed)
            t0 = time.perf_counter()
            for _ in range(cfg.model.rounds):
                sim.run(1, executor, cfg.attack.round)
                entry["rounds"] = sim.state.round
            entry["round_logs"] = [lg.to_dict() for lg in sim.logs]
            log.info("seed %d: %d rounds in %.1fs", seed, cfg.model.rounds, time.perf_counter() - t0)
            stage = "evaluate"
            report = evaluate(cfg, sim, idx, seed)
            reports.append(report)
            rows.append(csv_row(cfg, seed, report))
            if save:
                stage = "save"
                save_run(path / f"seed{seed}", sim, ds)
    except FedUnlearnError as exc:
        manifest["status"] = "failed"
        manifest["failure"] = {"stage": stage, "seed": seed, "error": type(exc).__name__, "message": str(exc)}
        _write_manifest(path, manifest)
        raise
    finally:
        if executor is not None:
            executor.shutdown()
    manifest["status"] = "ok"
    _write_manifest(path, manifest)
    write_csv(path / "metrics.csv", rows)
    return ExperimentResult(MetricReport.mean(reports), reports, seeds, path, manifest)


def _write_manifest(path: Path, manifest: dict) -> None:
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8")


def sweep_lambda(cfg: ExperimentConfig, lams, out_dir=None, save: bool = False) -> list[dict]:
    """One DSVAE run per lambda on a shared seed; rows of (lambda, NDCG@10, BAcc, gradient-attack Acc)."""
    rows = []
    base = Path(out_dir) if out_dir is not None else cfg.output_dir()
    for lam in lams:
        c = cfg.with_overrides(["adversary.head=dsvae", f"adversary.lambda={float(lam)!r}"])
        res = run_experiment(c, base / c.run_id(), save=save)
        rows.append({"lambda": float(lam), "ndcg10": res.report.ndcg[10], "bacc": res.report.bacc,
                     "grad_attack_acc": res.report.grad_attack_acc, "run_id": c.run_id()})
    return rows


def merge_reports(paths) -> list[dict]:
    """Concatenate metrics CSVs (in the given order) into a list of rows."""
    rows = []
    for p in paths:
        with open(p, newline="", encoding="utf-8") as fh:
            rows.extend(csv.DictReader(fh))
    return rows
