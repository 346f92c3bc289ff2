"""User-level federated training: client sampling, local updates, FedAvg
aggregation and capture of the adversary's final-layer gradients.

Every client is a single user. User embeddings live only in ``ClientState``;
the server-side ``GlobalState`` holds item embeddings, scorer and adversary.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field

import numpy as np

from . import adversary as adv
from .errors import DimensionError, DomainError
from .numkernel import RngStream
from .recmodel import ScorerParams, bce_loss_and_grads, load_checkpoint, sample_negatives, save_checkpoint, sgd_step


@dataclass
class FedConfig:
    lr: float = 0.1
    lr_adv: float = 0.1
    negatives: int = 4
    fraction: float = 0.1
    local_epochs: int = 1
    batch_size: int | None = None  # None: one full-batch step per local epoch
    adv_weight: float = 1.0
    sut: adv.SutConfig = field(default_factory=adv.SutConfig)
    pretrain_rounds: int = 0  # adversary trains without unlearning before this round
    record_oracle: bool = True  # keep client-side values next to records for evaluation


@dataclass
class GlobalState:
    items: np.ndarray
    scorer: ScorerParams
    adversary: adv.AdversaryParams | None
    round: int = 0

    def copy(self) -> "GlobalState":
        return GlobalState(
            self.items.copy(),
            self.scorer.copy(),
            self.adversary.copy() if self.adversary is not None else None,
            self.round,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"items": self.items}
        out.update({f"scorer/{k}": v for k, v in self.scorer.arrays().items()})
        if self.adversary is not None:
            out.update({f"adversary/{k}": v for k, v in self.adversary.arrays().items()})
        return out


@dataclass
class ClientState:
    user: int
    em_u: np.ndarray
    y: int
    train_items: np.ndarray


@dataclass
class GradientRecord:
    round: int
    client: int
    head: str
    grads: dict[str, np.ndarray]  # final-layer gradients: Wmu (plain W) and Wsigma
    y: int  # evaluation only; attack routines never read it
    oracle: dict[str, np.ndarray] | None = None  # client-side em_u / eps1 / eps2

    def to_json(self) -> str:
        doc = {
            "round": self.round,
            "client": self.client,
            "head": self.head,
            "grads": {k: v.tolist() for k, v in sorted(self.grads.items())},
            "y": self.y,
        }
        if self.oracle is not None:
            doc["oracle"] = {k: v.tolist() for k, v in sorted(self.oracle.items())}
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "GradientRecord":
        doc = json.loads(line)
        oracle = doc.get("oracle")
        return cls(
            doc["round"],
            doc["client"],
            doc["head"],
            {k: np.asarray(v, dtype=np.float64) for k, v in doc["grads"].items()},
            doc["y"],
            {k: np.asarray(v, dtype=np.float64) for k, v in oracle.items()} if oracle else None,
        )


@dataclass
class SharedDelta:
    item_rows: np.ndarray
    item_values: np.ndarray
    scorer: dict[str, np.ndarray]
    adversary: dict[str, np.ndarray]


@dataclass
class ClientUpdate:
    user: int
    em_u: np.ndarray
    delta: SharedDelta
    record: GradientRecord | None
    rec_loss: float
    adv_loss: float | None
    skipped: float | None  # fraction of local adversarial steps with no reversal


@dataclass
class RoundLog:
    round: int
    clients: list[int]
    rec_loss: float
    adv_loss: float | None
    skip_rate: float | None

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "clients": self.clients,
            "rec_loss": self.rec_loss,
            "adv_loss": self.adv_loss,
            "skip_rate": self.skip_rate,
        }


def sample_size(n: int, fraction: float) -> int:
    # guard against 0.3 * 10 = 3.0000000000000004
    return min(n, max(1, math.ceil(round(fraction * n, 9))))


def sample_clients(users, fraction: float, rng: RngStream) -> list[int]:
    users = sorted(users)
    if not users:
        raise DomainError("no users to sample from")
    if not 0.0 < fraction <= 1.0:
        raise DomainError("sample fraction must be in (0, 1]")
    k = sample_size(len(users), fraction)
    idx = rng.choice(len(users), size=k, replace=False)
    return sorted(users[i] for i in idx)


def local_update(client: ClientState, snapshot: GlobalState, cfg: FedConfig, rng: RngStream) -> ClientUpdate:
    """One round of client work against a read-only snapshot.

    Every local mini-batch step descends ``L_rec`` plus the reversed
    adversarial term on the user embedding. The adversary stays at the
    snapshot during the round (a single user's label would otherwise
    overfit it); its CE gradients are summed into one delta. The first
    adversarial evaluation of the round is the gradient record the server
    keeps.
    """
    em_u = client.em_u.copy()
    record = None
    adv_losses: list[float] = []
    skips: list[bool] = []
    local_adv = snapshot.adversary
    adv_grad_sum = {k: np.zeros_like(v) for k, v in local_adv.arrays().items()} if local_adv else {}
    unlearn = snapshot.round >= cfg.pretrain_rounds
    adv_rng = rng.derive("adv")

    def adversarial(em):
        nonlocal record
        res = adv.adversarial_step(em, client.y, local_adv, cfg.sut, cfg.adv_weight, adv_rng, unlearn=unlearn)
        if record is None:
            oracle = None
            if cfg.record_oracle:
                oracle = {"em_u": res.trace.em_u.copy()}
                if res.trace.noise.eps1 is not None:
                    oracle["eps1"] = res.trace.noise.eps1
                if res.trace.noise.eps2 is not None:
                    oracle["eps2"] = res.trace.noise.eps2
            record = GradientRecord(
                snapshot.round, client.user, local_adv.head,
                {k: v.copy() for k, v in res.grads.final_layer().items()}, int(client.y), oracle,
            )
        adv_losses.append(res.loss)
        skips.append(res.skip)
        for k, v in res.grads.params.items():
            adv_grad_sum[k] += v
        return res.em_grad

    positives = np.asarray(client.train_items, dtype=np.int64)
    local_items: dict[int, np.ndarray] = {}
    scorer = snapshot.scorer.copy()
    items = snapshot.items
    losses = []
    rec_rng = rng.derive("rec")
    for _ in range(cfg.local_epochs):
        order = rec_rng.permutation(positives.size)
        negs = sample_negatives(positives, items.shape[0], cfg.negatives * positives.size, rec_rng)
        bs = cfg.batch_size or positives.size
        for start in range(0, positives.size, bs):
            pos_b = positives[order[start:start + bs]]
            neg_b = negs[start * cfg.negatives:(start + bs) * cfg.negatives]
            touched = np.union1d(pos_b, neg_b)
            # the client's working copy of the rows this batch needs
            work = np.array([local_items.get(int(r), items[r]) for r in touched])
            remap = {int(r): k for k, r in enumerate(touched)}
            pos_l = np.array([remap[int(r)] for r in pos_b], dtype=np.int64)
            neg_l = np.array([remap[int(r)] for r in neg_b], dtype=np.int64)
            g = bce_loss_and_grads(em_u, pos_l, neg_l, work, scorer)
            losses.append(g.loss)
            grad_u = g.grad_em_u
            if local_adv is not None:
                grad_u = grad_u + adversarial(em_u)
            em_u = sgd_step(em_u, grad_u, cfg.lr)
            new_rows = sgd_step(work[g.item_rows], g.grad_item_rows, cfg.lr)
            for k, local_r in enumerate(g.item_rows):
                local_items[int(touched[local_r])] = new_rows[k]
            if scorer.variant != "dot":
                scorer = scorer.with_arrays(
                    {k: sgd_step(v, g.grad_scorer[k], cfg.lr) for k, v in scorer.arrays().items()}
                )

    rows = np.array(sorted(local_items), dtype=np.int64)
    values = (np.array([local_items[int(r)] for r in rows]) - items[rows]) if rows.size else np.zeros((0, items.shape[1]))
    scorer_delta = {k: scorer.arrays()[k] - v for k, v in snapshot.scorer.arrays().items()}
    adv_delta = {k: -cfg.lr_adv * g for k, g in adv_grad_sum.items()}
    delta = SharedDelta(rows, values, scorer_delta, adv_delta)
    return ClientUpdate(
        client.user, em_u, delta, record, float(np.mean(losses)),
        float(np.mean(adv_losses)) if adv_losses else None,
        float(np.mean(skips)) if skips else None,
    )


def aggregate(snapshot: GlobalState, deltas, weights=None) -> GlobalState:
    """FedAvg: shared params += sum_k w_k delta_k / sum_k w_k (reduced in the given order)."""
    deltas = list(deltas)
    if weights is None:
        weights = [1.0] * len(deltas)
    weights = [float(w) for w in weights]
    if len(weights) != len(deltas):
        raise DimensionError("one weight per delta required")
    if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
        raise DomainError("weights must be nonnegative and not all zero")
    total = sum(weights)
    items_acc = np.zeros_like(snapshot.items)
    scorer_acc = {k: np.zeros_like(v) for k, v in snapshot.scorer.arrays().items()}
    adv_acc = {k: np.zeros_like(v) for k, v in snapshot.adversary.arrays().items()} if snapshot.adversary else {}
    for d, w in zip(deltas, weights):
        if d.item_rows.size:
            if d.item_values.shape != (d.item_rows.size, snapshot.items.shape[1]):
                raise DimensionError("item delta shape mismatch")
            items_acc[d.item_rows] += w * d.item_values
        for acc, part in ((scorer_acc, d.scorer), (adv_acc, d.adversary)):
            for k, v in part.items():
                if k not in acc or acc[k].shape != v.shape:
                    raise DimensionError(f"delta for {k!r} does not match the global state")
                acc[k] += w * v
    items = snapshot.items + items_acc / total
    scorer = snapshot.scorer.with_arrays({k: v + scorer_acc[k] / total for k, v in snapshot.scorer.arrays().items()})
    adversary = None
    if snapshot.adversary is not None:
        adversary = snapshot.adversary.with_arrays(
            {k: v + adv_acc[k] / total for k, v in snapshot.adversary.arrays().items()}
        )
    return GlobalState(items, scorer, adversary, snapshot.round + 1)


def client_stream(rng: RngStream, round_idx: int, user: int) -> RngStream:
    return rng.derive("client", round_idx, user)


def run_round(state: GlobalState, clients: dict[int, ClientState], cfg: FedConfig, rng: RngStream,
              executor: Executor | None = None):
    """Sample, update locally against a frozen snapshot, aggregate in client-id order."""
    t = state.round
    sampled = sample_clients(clients.keys(), cfg.fraction, rng.derive("sample", t))
    snapshot = state

    def work(u):
        return local_update(clients[u], snapshot, cfg, client_stream(rng, t, u))

    if executor is None:
        updates = [work(u) for u in sampled]
    else:
        updates = list(executor.map(work, sampled))
    updates.sort(key=lambda up: up.user)
    new_state = aggregate(snapshot, [up.delta for up in updates])
    for up in updates:
        clients[up.user].em_u = up.em_u
    adv_losses = [up.adv_loss for up in updates if up.adv_loss is not None]
    skips = [up.skipped for up in updates if up.skipped is not None]
    log = RoundLog(
        t,
        sampled,
        float(np.mean([up.rec_loss for up in updates])),
        float(np.mean(adv_losses)) if adv_losses else None,
        float(np.mean(skips)) if skips else None,
    )
    records = [up.record for up in updates if up.record is not None]
    return new_state, log, records


class RecordStore:
    """Server-side gradient store keeping only each client's latest record,
    plus the adversary snapshot of every round a kept record refers to."""

    def __init__(self):
        self.latest: dict[int, GradientRecord] = {}
        self.snapshots: dict[int, adv.AdversaryParams] = {}

    def add(self, records, snapshot: adv.AdversaryParams | None):
        for r in records:
            self.latest[r.client] = r
            if snapshot is not None and r.round not in self.snapshots:
                self.snapshots[r.round] = snapshot
        live = {r.round for r in self.latest.values()}
        for rnd in [k for k in self.snapshots if k not in live]:
            del self.snapshots[rnd]

    def frozen(self) -> "RecordStore":
        out = RecordStore()
        out.latest = dict(self.latest)
        out.snapshots = dict(self.snapshots)
        return out

    def records(self) -> list[GradientRecord]:
        return [self.latest[c] for c in sorted(self.latest)]

    def write(self, records_path, snapshots_path) -> None:
        with open(records_path, "w", encoding="utf-8") as fh:
            for r in self.records():
                fh.write(r.to_json() + "\n")
        arrays, meta = {}, {}
        for rnd, p in sorted(self.snapshots.items()):
            for k, v in p.arrays().items():
                arrays[f"{rnd}/{k}"] = v
            meta[str(rnd)] = {"head": p.head, "lam": p.lam}
        save_checkpoint(snapshots_path, arrays, meta)

    @classmethod
    def read(cls, records_path, snapshots_path) -> "RecordStore":
        store = cls()
        with open(records_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    r = GradientRecord.from_json(line)
                    store.latest[r.client] = r
        arrays, meta = load_checkpoint(snapshots_path)
        for rnd, m in meta.items():
            parts = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.split("/", 1)[0] == rnd}
            store.snapshots[int(rnd)] = adv.AdversaryParams(
                m["head"], parts["W1"], parts["b1"], parts["Wmu"], parts.get("Wsigma"), m["lam"]
            )
        return store


@dataclass
class Simulation:
    state: GlobalState
    clients: dict[int, ClientState]
    cfg: FedConfig
    rng: RngStream
    logs: list[RoundLog] = field(default_factory=list)
    store: RecordStore = field(default_factory=RecordStore)
    attack_store: RecordStore | None = None

    def run(self, rounds: int, executor: Executor | None = None, attack_round: int | None = None):
        for _ in range(rounds):
            snapshot_adv = self.state.adversary
            self.state, log, records = run_round(self.state, self.clients, self.cfg, self.rng, executor)
            self.logs.append(log)
            self.store.add(records, snapshot_adv)
            if attack_round is not None and self.state.round == attack_round:
                self.attack_store = self.store.frozen()
        return self

    def embeddings(self) -> dict[int, np.ndarray]:
        return {u: c.em_u for u, c in sorted(self.clients.items())}
