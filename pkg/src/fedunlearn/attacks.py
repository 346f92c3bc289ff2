"""Attribute-inference and gradient-reconstruction attacks.

* an MLP attribute attacker trained on a shadow subset of user embeddings;
* iterative gradient matching (DLG) against the adversary's final layer;
* the sign rule that reads the label off final-layer gradient rows;
* closed-form label reconstruction ``y*_i = yhat'_i - delta_i`` for the
  plain, VAE and DSVAE final layers, with an oracle-mode factorisation of
  ``delta_i`` that exposes how the DSVAE noise couples into it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import adversary as adv
from .errors import DegenerateInputError, DimensionError, DomainError, StateError
from .numkernel import RngStream, argmax_lowest, softmax

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# attribute inference from embeddings


@dataclass
class AttackerMLP:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.W1.shape[1]:
            raise DimensionError(f"attacker expects dim {self.W1.shape[1]}, got {X.shape[1]}")
        Xs = (X - self.mean) / self.scale
        H = np.maximum(Xs @ self.W1.T + self.b1, 0.0)
        return H @ self.W2.T + self.b2


@dataclass
class AttackSplit:
    shadow: list[int]
    evaluation: list[int]


def split_shadow(users, fraction: float, rng: RngStream) -> AttackSplit:
    users = sorted(users)
    if not 0.0 < fraction < 1.0:
        raise DomainError("shadow fraction must lie in (0, 1)")
    n_shadow = max(1, min(len(users) - 1, int(round(fraction * len(users)))))
    perm = rng.permutation(len(users))
    shadow = sorted(users[i] for i in perm[:n_shadow])
    evaluation = sorted(users[i] for i in perm[n_shadow:])
    return AttackSplit(shadow, evaluation)


def train_attribute_attacker(embeddings: dict, labels: dict, shadow_fraction: float = 0.2,
                             rng: RngStream | None = None, hidden: int = 100, epochs: int = 300,
                             lr: float = 0.01, weight_decay: float = 1e-4, n_classes: int | None = None):
    """Train the MLP attacker on the shadow users (full-batch Adam on CE).

    Inputs are standardised with shadow-set statistics. Returns the attacker
    and the shadow/evaluation split.
    """
    rng = rng if rng is not None else RngStream(0, ("attacker",))
    split = split_shadow(embeddings.keys(), shadow_fraction, rng.derive("split"))
    y = np.array([labels[u] for u in split.shadow], dtype=np.int64)
    if np.unique(y).size < 2:
        raise DomainError("shadow set contains a single class")
    n_classes = n_classes or int(max(labels.values())) + 1
    X = np.array([embeddings[u] for u in split.shadow], dtype=np.float64)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Xs = (X - mean) / scale
    d = X.shape[1]
    init = rng.derive("init")
    b = math.sqrt(6.0 / (hidden + d))
    params = {
        "W1": init.uniform(-b, b, size=(hidden, d)),
        "b1": np.zeros(hidden),
        "W2": init.uniform(-math.sqrt(6.0 / (hidden + n_classes)), math.sqrt(6.0 / (hidden + n_classes)),
                           size=(n_classes, hidden)),
        "b2": np.zeros(n_classes),
    }
    onehot = np.eye(n_classes)[y]
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    beta1, beta2 = 0.9, 0.999
    n = X.shape[0]
    for t in range(1, epochs + 1):
        A = Xs @ params["W1"].T + params["b1"]
        H = np.maximum(A, 0.0)
        S = H @ params["W2"].T + params["b2"]
        S -= S.max(axis=1, keepdims=True)
        P = np.exp(S)
        P /= P.sum(axis=1, keepdims=True)
        dS = (P - onehot) / n
        dH = dS @ params["W2"]
        dA = dH * (A > 0)
        grads = {
            "W2": dS.T @ H + weight_decay * params["W2"],
            "b2": dS.sum(axis=0),
            "W1": dA.T @ Xs + weight_decay * params["W1"],
            "b1": dA.sum(axis=0),
        }
        for k in params:
            m[k] = beta1 * m[k] + (1 - beta1) * grads[k]
            v2[k] = beta2 * v2[k] + (1 - beta2) * grads[k] ** 2
            mhat = m[k] / (1 - beta1 ** t)
            vhat = v2[k] / (1 - beta2 ** t)
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + 1e-8)
    attacker = AttackerMLP(params["W1"], params["b1"], params["W2"], params["b2"], mean, scale)
    return attacker, split


def infer_attributes(attacker: AttackerMLP, embeddings: dict) -> dict:
    """argmax of the attacker's output per user (ties -> lowest class)."""
    users = list(embeddings)
    if not users:
        return {}
    S = attacker.logits(np.array([embeddings[u] for u in users]))
    return {u: argmax_lowest(S[k]) for k, u in enumerate(users)}


# --------------------------------------------------------------------------
# sign rule on final-layer gradient rows


def _mu_grad(record_or_grads) -> np.ndarray:
    grads = getattr(record_or_grads, "grads", record_or_grads)
    if isinstance(grads, dict):
        return np.asarray(grads["Wmu"], dtype=np.float64)
    return np.asarray(grads, dtype=np.float64)


def idlg_label(record_or_grads) -> int | None:
    """Label from row signs of the final-layer gradient, or None when undecided.

    With non-negative layer inputs the true class's row is (ŷ_y - 1) * input,
    entrywise <= 0, while every other row is ŷ_j * input >= 0. The rule
    returns the unique row with a negative entry when no row mixes signs.
    If the softmax saturates (ŷ_y == 1.0 in floating point) the true row is
    exactly zero instead; a unique zero row among strictly positive rows is
    then returned.
    """
    G = _mu_grad(record_or_grads)
    signs = []
    for row in G:
        nz = row[row != 0.0]
        if nz.size == 0:
            signs.append(0)
        elif np.all(nz < 0):
            signs.append(-1)
        elif np.all(nz > 0):
            signs.append(1)
        else:
            return None
    neg = [i for i, s in enumerate(signs) if s == -1]
    if neg:
        return neg[0] if len(neg) == 1 else None
    zero = [i for i, s in enumerate(signs) if s == 0]
    if len(zero) == 1 and len(signs) > 1:
        return zero[0]
    return None


# --------------------------------------------------------------------------
# closed-form reconstruction


@dataclass
class ReconstructionResult:
    y_star: np.ndarray
    yhat_prime: np.ndarray
    delta: np.ndarray
    label: int
    recovered: bool | None = None
    factorized_delta: np.ndarray | None = None  # oracle mode only

    def with_truth(self, y: int) -> "ReconstructionResult":
        self.recovered = self.label == int(y)
        return self


def _closed_form(G, directions, yhat_prime) -> ReconstructionResult:
    """delta_i = <d_i, G_i> / ||d_i||^2 where d_i = d logit_i / d W_i along the matched path."""
    G = np.asarray(G, dtype=np.float64)
    yhat_prime = np.asarray(yhat_prime, dtype=np.float64)
    D = np.broadcast_to(np.asarray(directions, dtype=np.float64), G.shape)
    norms = np.einsum("ij,ij->i", D, D)
    if np.any(norms <= 0):
        raise DegenerateInputError("attacker-side layer input has zero norm")
    if yhat_prime.shape[0] != G.shape[0]:
        raise DimensionError("yhat' and gradient rows disagree on the class count")
    delta = np.einsum("ij,ij->i", D, G) / norms
    y_star = yhat_prime - delta
    return ReconstructionResult(y_star, yhat_prime.copy(), delta, argmax_lowest(y_star))


def closed_form_label_plain(record_or_grads, h_prime, y_hat_prime) -> ReconstructionResult:
    return _closed_form(_mu_grad(record_or_grads), np.asarray(h_prime, dtype=np.float64)[None, :], y_hat_prime)


def closed_form_label_vae(record_or_grads, z_prime, y_hat_prime) -> ReconstructionResult:
    return _closed_form(_mu_grad(record_or_grads), np.asarray(z_prime, dtype=np.float64)[None, :], y_hat_prime)


def closed_form_label_dsvae(record_or_grads, z_prime, eps1_prime, y_hat_prime, oracle=None) -> ReconstructionResult:
    """DSVAE mu-path reconstruction.

    ``eps1_prime`` is the attacker's own draw, one row per class (a single
    vector is broadcast). When ``oracle = (z, eps1, yhat, y)`` carries the
    client's true values, the factorised form
    ``(yhat_i - y_i) * <eps1_i * eps1'_i, z * z'> / ||z' * eps1'_i||^2`` is
    reported alongside.
    """
    G = _mu_grad(record_or_grads)
    z_prime = np.asarray(z_prime, dtype=np.float64)
    E1p = np.broadcast_to(np.asarray(eps1_prime, dtype=np.float64), G.shape)
    D = z_prime[None, :] * E1p
    res = _closed_form(G, D, y_hat_prime)
    if oracle is not None:
        z, eps1, yhat, y = oracle
        E1 = np.broadcast_to(np.asarray(eps1, dtype=np.float64), G.shape)
        pref = np.asarray(yhat, dtype=np.float64) - np.eye(G.shape[0])[int(y)]
        coupling = np.einsum("ij,ij->i", E1 * E1p, (np.asarray(z) * z_prime)[None, :].repeat(G.shape[0], 0))
        res.factorized_delta = pref * coupling / np.einsum("ij,ij->i", D, D)
    return res


def decompose_components(result: ReconstructionResult, y_true: int, yhat_true) -> dict:
    """Prediction-approximation error |yhat' - yhat| and preference-masking
    error |delta - (yhat - y)| per class, plus their means."""
    yhat_true = np.asarray(yhat_true, dtype=np.float64)
    pref = yhat_true - np.eye(yhat_true.shape[0])[int(y_true)]
    yhat_err = np.abs(result.yhat_prime - yhat_true)
    delta_err = np.abs(result.delta - pref)
    return {
        "yhat_error": yhat_err,
        "delta_error": delta_err,
        "mean_yhat_error": float(yhat_err.mean()),
        "mean_delta_error": float(delta_err.mean()),
    }


# --------------------------------------------------------------------------
# iterative gradient matching


@dataclass
class DlgConfig:
    steps: int = 300
    lr: float = 0.05
    seed: int = 0
    optimizer: str = "lbfgs"  # lbfgs | adam | gd
    target: str | None = None  # plain | vae_mu | dsvae_mu; None: follow the snapshot head
    restarts: int = 4  # fresh N(0, 1) dummies; the lowest matching loss wins
    tol: float = 1e-16  # stop restarting once a run gets below this loss

    def __post_init__(self):
        if self.steps < 1 or self.lr <= 0 or self.restarts < 1:
            raise DomainError("DLG needs steps >= 1, lr > 0 and restarts >= 1")
        if self.optimizer not in ("lbfgs", "adam", "gd"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class DlgResult:
    em: np.ndarray
    y_dist: np.ndarray
    label: int | None
    status: str  # ok | ambiguous | failed
    final_loss: float
    losses: list[float] = field(default_factory=list)
    h: np.ndarray | None = None
    yhat: np.ndarray | None = None
    noise: adv.NoiseDraw | None = None


_TARGET_HEAD = {"plain": "plain", "vae_mu": "vae", "dsvae_mu": "dsvae"}


def gradient_matching_loss(params: adv.AdversaryParams, noise: adv.NoiseDraw, G: np.ndarray,
                           em, t) -> tuple[float, np.ndarray, np.ndarray]:
    """||grad W'mu(em, softmax(t)) - G||^2 and its gradients w.r.t. em and t.

    The dummy mu-path gradient for class i is ``(ŷ'_i - y'_i) * (h' * e_i)``
    with ``e_i`` the attacker's eps1 row (ones for plain and vae heads).
    """
    pre = params.W1 @ em + params.b1
    h = np.maximum(pre, 0.0)
    Weff = adv.effective_weights(params, noise)
    s = Weff @ h
    p = softmax(s)
    yd = softmax(t)
    g = p - yd
    E1 = noise.eps1 if params.head == "dsvae" else None
    U = h[None, :] * E1 if E1 is not None else np.broadcast_to(h, G.shape)
    R = g[:, None] * U - G
    loss = float(np.sum(R * R))
    dR = 2.0 * R
    dg = np.einsum("ij,ij->i", dR, U)
    dU = dR * g[:, None]
    dh = (dU * E1).sum(axis=0) if E1 is not None else dU.sum(axis=0)
    ds = p * (dg - p @ dg)
    dh = dh + Weff.T @ ds
    dy = -dg
    dt = yd * (dy - yd @ dy)
    dem = params.W1.T @ (dh * (pre > 0))
    return loss, dem, dt


def dlg_attack(record_or_grads, snapshot: adv.AdversaryParams, cfg: DlgConfig | None = None,
               rng: RngStream | None = None) -> DlgResult:
    """Reconstruct (em, y) by matching the recorded mu-path gradient.

    Dummies start from N(0, 1) (label as free logits through a softmax). For
    stochastic heads the attacker draws its own noise once per attack; it
    never sees the client's draw.
    """
    cfg = cfg or DlgConfig()
    if cfg.target is not None and _TARGET_HEAD[cfg.target] != snapshot.head:
        raise StateError(f"target {cfg.target!r} does not match the snapshot head {snapshot.head!r}")
    G = _mu_grad(record_or_grads)
    if G.shape != snapshot.Wmu.shape:
        raise StateError("recorded gradient does not match the snapshot's final layer")
    rng = rng if rng is not None else RngStream(cfg.seed, ("dlg",))
    noise = adv.draw_noise(snapshot, rng.derive("noise")) if snapshot.head != "plain" else adv.NoiseDraw()

    best = None
    for r in range(cfg.restarts):
        out = _dlg_run(G, snapshot, noise, cfg, rng.derive("init", r))
        if out.status == "ambiguous":
            return out
        if best is None or (out.status == "ok" and (best.status != "ok" or out.final_loss < best.final_loss)):
            best = out
        if best.status == "ok" and best.final_loss < cfg.tol:
            break
    return best


def _dlg_run(G, snapshot, noise, cfg: DlgConfig, init: RngStream) -> DlgResult:
    d = snapshot.dim
    # a dummy with every hidden unit dead has zero gradient and cannot move; redraw it
    for _ in range(100):
        em0 = init.normal(d)
        if np.any(snapshot.W1 @ em0 + snapshot.b1 > 0):
            break
    t0 = init.normal(snapshot.n_classes)

    if not np.any(G):
        trace = adv.forward(snapshot, em0, noise=noise)
        return DlgResult(em0, softmax(t0), None, "ambiguous", 0.0, [0.0], trace.h, trace.yhat, noise)

    losses: list[float] = []

    def fun(x):
        loss, dem, dt = gradient_matching_loss(snapshot, noise, G, x[:d], x[d:])
        return loss, np.concatenate([dem, dt])

    x = np.concatenate([em0, t0])
    with np.errstate(all="ignore"):
        if cfg.optimizer == "lbfgs":
            def tracked(x):
                out = fun(x)
                losses.append(out[0])
                return out

            res = optimize.minimize(
                tracked, x, jac=True, method="L-BFGS-B",
                options={"maxiter": cfg.steps, "maxfun": cfg.steps * 4, "ftol": 0.0, "gtol": 1e-14},
            )
            x = res.x
        else:
            m = np.zeros_like(x)
            v = np.zeros_like(x)
            for step in range(1, cfg.steps + 1):
                loss, grad = fun(x)
                losses.append(loss)
                if not np.isfinite(loss):
                    break
                if cfg.optimizer == "gd":
                    x = x - cfg.lr * grad
                else:
                    m = 0.9 * m + 0.1 * grad
                    v = 0.999 * v + 0.001 * grad * grad
                    x = x - cfg.lr * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-12)
        final = fun(x)[0]
    losses.append(final)
    em, t = x[:d], x[d:]
    if not (np.isfinite(final) and np.all(np.isfinite(x))):
        return DlgResult(em, np.full(snapshot.n_classes, np.nan), None, "failed", float("nan"), losses)
    y_dist = softmax(t)
    trace = adv.forward(snapshot, em, noise=noise)
    return DlgResult(em, y_dist, argmax_lowest(y_dist), "ok", final, losses, trace.h, trace.yhat, noise)


def reconstruct_after_dlg(record_or_grads, snapshot: adv.AdversaryParams, dlg: DlgResult) -> ReconstructionResult:
    """Closed-form reconstruction using the attacker-side values DLG converged to."""
    if dlg.h is None:
        raise StateError("DLG result carries no attacker-side activations")
    if snapshot.head == "plain":
        return closed_form_label_plain(record_or_grads, dlg.h, dlg.yhat)
    if snapshot.head == "vae":
        return closed_form_label_vae(record_or_grads, dlg.h, dlg.yhat)
    return closed_form_label_dsvae(record_or_grads, dlg.h, dlg.noise.eps1, dlg.yhat)


# --------------------------------------------------------------------------
# Monte Carlo harness on simulated client records


@dataclass
class SimInstance:
    params: adv.AdversaryParams
    em: np.ndarray
    y: int
    trace: adv.ForwardTrace
    grads: dict[str, np.ndarray]


def random_params(rng: RngStream, dim: int, hidden: int, n_classes: int) -> dict[str, np.ndarray]:
    return {
        "W1": rng.derive("W1").normal((hidden, dim)),
        "b1": rng.derive("b1").normal(hidden),
        "Wmu": rng.derive("Wmu").normal((n_classes, hidden)),
        "Wsigma": rng.derive("Wsigma").normal((n_classes, hidden)),
        "em": rng.derive("em").normal(dim),
    }


def simulate_instance(head: str, lam: float, rng: RngStream, dim: int = 4, hidden: int = 8,
                      n_classes: int = 2, base: dict | None = None,
                      positive_hidden: bool = False) -> SimInstance:
    """A random client record; pass the same ``rng`` across heads for matched trials.

    ``positive_hidden`` shifts the first-layer bias so every hidden unit is
    active (strictly positive post-ReLU input to the final layer).
    """
    base = dict(base or random_params(rng.derive("params"), dim, hidden, n_classes))
    if positive_hidden:
        base["b1"] = np.abs(base["W1"] @ base["em"]) + np.abs(base["b1"]) + 1e-3
    y = int(rng.derive("label").integers(0, n_classes))
    params = adv.AdversaryParams(
        head, base["W1"], base["b1"], base["Wmu"], None if head == "plain" else base["Wsigma"],
        lam if head == "dsvae" else 0.0,
    )
    trace = adv.forward(params, base["em"], rng.derive("client-noise"))
    grads = adv.backward(params, trace, y).final_layer()
    return SimInstance(params, base["em"], y, trace, grads)


def monte_carlo(attack: str, head: str, lam: float = 4.0, trials: int = 1000, seed: int = 0,
                dim: int = 4, hidden: int = 8, n_classes: int = 2, dlg: DlgConfig | None = None,
                positive_hidden: bool = False) -> dict:
    """Recovery rate of one attack over simulated records.

    ``attack`` is ``idlg``, ``dlg`` or ``closed_form`` (closed form with the
    attacker holding the true embedding but drawing its own noise, which
    isolates the effect of the head's stochasticity).
    """
    root = RngStream(seed, ("monte-carlo",))
    hits = 0
    yhat_errs, delta_errs = [], []
    for k in range(trials):
        rng = root.derive(k)
        inst = simulate_instance(head, lam, rng, dim, hidden, n_classes, positive_hidden=positive_hidden)
        if attack == "idlg":
            label = idlg_label(inst.grads)
        elif attack == "dlg":
            label = dlg_attack(inst.grads, inst.params, dlg or DlgConfig(), rng.derive("attacker")).label
        elif attack == "closed_form":
            a_noise = adv.draw_noise(inst.params, rng.derive("attacker").derive("noise"))
            a_trace = adv.forward(inst.params, inst.em, noise=a_noise)
            try:
                if head == "dsvae":
                    res = closed_form_label_dsvae(inst.grads, a_trace.h, a_noise.eps1, a_trace.yhat)
                else:
                    res = closed_form_label_plain(inst.grads, a_trace.h, a_trace.yhat)
            except DegenerateInputError:
                continue  # every hidden unit dead: nothing to reconstruct
            comp = decompose_components(res, inst.y, inst.trace.yhat)
            yhat_errs.append(comp["mean_yhat_error"])
            delta_errs.append(comp["mean_delta_error"])
            label = res.label
        else:
            raise DomainError(f"unknown attack {attack!r}")
        hits += int(label is not None and label == inst.y)
    report = {"attack": attack, "head": head, "lambda": lam, "trials": trials, "recovery_rate": hits / trials}
    report["mean_delta_error"] = float(np.mean(delta_errs)) if delta_errs else None
    report["mean_yhat_error"] = float(np.mean(yhat_errs)) if yhat_errs else None
    return report


def attack_store(store, cfg: DlgConfig, method: str = "dlg", seed: int = 0) -> dict:
    """Run a label attack on every record of a RecordStore; returns per-client labels and accuracy."""
    root = RngStream(seed, ("store-attack",))
    preds = {}
    for rec in store.records():
        snap = store.snapshots[rec.round]
        if method == "dlg":
            preds[rec.client] = dlg_attack(rec, snap, cfg, root.derive(rec.client)).label
        elif method == "idlg":
            preds[rec.client] = idlg_label(rec)
        else:
            raise DomainError(f"unknown gradient attack {method!r}")
    records = store.records()
    hits = sum(1 for r in records if preds[r.client] is not None and preds[r.client] == r.y)
    return {"predictions": preds, "accuracy": hits / len(records) if records else float("nan")}
