"""Adversarial attribute classifier with plain / VAE / DSVAE final layers,
the gradient reversal layer and the selective unlearning trigger (SUT).

The classifier is ``h = relu(W1 em_u + b1)`` followed by a final layer whose
logit for class ``i`` is

* plain: ``W_i . h``
* vae:   ``(Wmu_i + Wsigma_i * eps2_i) . h``
* dsvae: ``(Wmu_i * eps1_i + Wsigma_i * eps2_i) . h``

with ``eps1 ~ N(1, lam)`` and ``eps2 ~ N(0, 1)`` drawn per weight element on
every forward call and cached in the trace for the backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGradientError, DimensionError, DomainError, StateError
from .numkernel import RngStream, argmax_lowest, as_vector, log_softmax, sample_gaussian, softmax
from .recmodel import xavier_init

HEADS = ("plain", "vae", "dsvae")
SUT_MODES = ("binary", "continuous", "always")


@dataclass
class AdversaryParams:
    head: str
    W1: np.ndarray
    b1: np.ndarray
    Wmu: np.ndarray  # the plain head's W lives here
    Wsigma: np.ndarray | None = None
    lam: float = 0.0

    def __post_init__(self):
        if self.head not in HEADS:
            raise DomainError(f"unknown head {self.head!r}")
        if self.lam < 0:
            raise DomainError("stochasticity coefficient must be >= 0")
        if self.head != "plain" and self.Wsigma is None:
            raise DomainError(f"{self.head} head needs Wsigma")

    @property
    def n_classes(self) -> int:
        return self.Wmu.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"W1": self.W1, "b1": self.b1, "Wmu": self.Wmu}
        if self.Wsigma is not None:
            out["Wsigma"] = self.Wsigma
        return out

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "AdversaryParams":
        return AdversaryParams(
            self.head, arrays["W1"], arrays["b1"], arrays["Wmu"], arrays.get("Wsigma"), self.lam
        )

    def copy(self) -> "AdversaryParams":
        return self.with_arrays({k: v.copy() for k, v in self.arrays().items()})


@dataclass
class NoiseDraw:
    eps1: np.ndarray | None = None  # dsvae only
    eps2: np.ndarray | None = None  # vae and dsvae


@dataclass
class ForwardTrace:
    em_u: np.ndarray
    pre: np.ndarray  # W1 em_u + b1
    h: np.ndarray  # relu(pre); also the final-layer input z
    logits: np.ndarray
    yhat: np.ndarray
    noise: NoiseDraw = field(default_factory=NoiseDraw)

    @property
    def z(self) -> np.ndarray:
        return self.h

    @property
    def prediction(self) -> int:
        return argmax_lowest(self.yhat)


@dataclass
class AdvGrads:
    params: dict[str, np.ndarray]
    em_u: np.ndarray

    def final_layer(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k in ("Wmu", "Wsigma")}


@dataclass
class SutConfig:
    mode: str = "binary"
    eps: float = 400.0
    tau: float = 1.0

    def __post_init__(self):
        if self.mode not in SUT_MODES:
            raise DomainError(f"unknown SUT mode {self.mode!r}")
        if self.eps < 0:
            raise DomainError("GRL scale must be >= 0")
        if self.mode == "continuous" and self.tau <= 0:
            raise DomainError("tau must be positive in continuous mode")


def init_adversary(dim: int, n_classes: int, head: str, rng: RngStream, hidden: int = 100, lam: float = 4.0):
    W1 = xavier_init((hidden, dim), rng.derive("W1"))
    Wmu = xavier_init((n_classes, hidden), rng.derive("Wmu"))
    Wsigma = xavier_init((n_classes, hidden), rng.derive("Wsigma")) if head != "plain" else None
    return AdversaryParams(head, W1, np.zeros(hidden), Wmu, Wsigma, lam if head == "dsvae" else 0.0)


def draw_noise(params: AdversaryParams, rng: RngStream) -> NoiseDraw:
    """eps2 is drawn first, and eps1 is not drawn at lam=0, so a dsvae head
    with lam=0 consumes the stream exactly like a vae head."""
    shape = params.Wmu.shape
    if params.head == "plain":
        return NoiseDraw()
    eps2 = sample_gaussian(rng, np.zeros(shape), 1.0)
    if params.head == "vae":
        return NoiseDraw(eps2=eps2)
    if params.lam == 0:
        return NoiseDraw(eps1=np.ones(shape), eps2=eps2)
    eps1 = sample_gaussian(rng, np.ones(shape), params.lam)
    return NoiseDraw(eps1=eps1, eps2=eps2)


def effective_weights(params: AdversaryParams, noise: NoiseDraw) -> np.ndarray:
    if params.head == "plain":
        return params.Wmu
    if noise.eps2 is None or (params.head == "dsvae" and noise.eps1 is None):
        raise StateError(f"{params.head} head needs its noise draw")
    mu_path = params.Wmu * noise.eps1 if params.head == "dsvae" else params.Wmu
    return mu_path + params.Wsigma * noise.eps2


def forward(params: AdversaryParams, em_u, rng: RngStream | None = None, noise: NoiseDraw | None = None):
    """One forward pass; pass ``noise`` to pin the draw (gradient checks, replays)."""
    em_u = as_vector(em_u, "em_u")
    if em_u.shape[0] != params.dim:
        raise DimensionError(f"adversary expects dim {params.dim}, got {em_u.shape[0]}")
    if noise is None:
        if params.head != "plain" and rng is None:
            raise StateError("stochastic head needs an rng stream")
        noise = draw_noise(params, rng) if params.head != "plain" else NoiseDraw()
    pre = params.W1 @ em_u + params.b1
    h = np.maximum(pre, 0.0)
    logits = effective_weights(params, noise) @ h
    return ForwardTrace(em_u, pre, h, logits, softmax(logits), noise)


def _check_label(y, n_classes):
    if not 0 <= int(y) < n_classes:
        raise DomainError(f"label {y} out of range for {n_classes} classes")


def ce_loss(trace: ForwardTrace, y: int) -> float:
    _check_label(y, trace.yhat.shape[0])
    return float(-log_softmax(trace.logits)[int(y)])


def backward(params: AdversaryParams, trace: ForwardTrace, y: int) -> AdvGrads:
    """Gradients of the CE loss w.r.t. every adversary parameter and the input embedding."""
    if trace.h.shape[0] != params.hidden or trace.yhat.shape[0] != params.n_classes:
        raise StateError("trace was not produced by these parameters")
    if trace.em_u.shape[0] != params.dim:
        raise StateError("trace input dimension does not match the parameters")
    _check_label(y, params.n_classes)
    g = trace.yhat.copy()
    g[int(y)] -= 1.0
    outer = np.outer(g, trace.h)
    grads: dict[str, np.ndarray] = {}
    if params.head == "plain":
        grads["Wmu"] = outer
    elif params.head == "vae":
        grads["Wmu"] = outer
        grads["Wsigma"] = outer * trace.noise.eps2
    else:
        grads["Wmu"] = outer * trace.noise.eps1
        grads["Wsigma"] = outer * trace.noise.eps2
    dh = effective_weights(params, trace.noise).T @ g
    da = dh * (trace.pre > 0)
    grads["W1"] = np.outer(da, trace.em_u)
    grads["b1"] = da
    return AdvGrads(grads, params.W1.T @ da)


def grl_backward(upstream_grad, eps_u: float) -> np.ndarray:
    """Gradient reversal: identity forward, ``-eps_u * g`` backward."""
    if eps_u < 0:
        raise DomainError("GRL scale must be >= 0")
    return -eps_u * np.asarray(upstream_grad, dtype=np.float64)


def sut_budget(cfg: SutConfig, trace: ForwardTrace, y: int, input_grad_norm: float | None = None) -> float:
    """Per-user reversal scale.

    binary: ``eps`` when the adversary currently predicts ``y``, else 0.
    continuous: ``tau / ||grad_em CE||`` using the un-reversed input gradient.
    always: ``eps`` unconditionally (no trigger; used for ablations).
    """
    if cfg.mode == "binary":
        return cfg.eps if trace.prediction == int(y) else 0.0
    if cfg.mode == "always":
        return cfg.eps
    if input_grad_norm is None or not input_grad_norm > 0:
        raise DegenerateGradientError("continuous SUT needs a positive input-gradient norm")
    return cfg.tau / input_grad_norm


@dataclass
class AdvStepResult:
    em_grad: np.ndarray  # contribution to the user embedding's gradient
    grads: AdvGrads  # plain CE gradients (adversary parameters are always trained)
    eps_u: float
    skip: bool
    trace: ForwardTrace
    loss: float


def adversarial_step(em_u, y: int, params: AdversaryParams, cfg: SutConfig, adv_weight: float,
                     rng: RngStream | None, unlearn: bool = True) -> AdvStepResult:
    """Forward, backward and SUT gating for one user.

    The classifier receives its ordinary CE gradient regardless of the
    trigger. The embedding receives ``adv_weight * grl(grad_em CE, eps_u)``,
    which is zero when ``eps_u`` is 0, ``adv_weight`` is 0 or ``unlearn``
    is False (pretraining rounds).
    """
    trace = forward(params, em_u, rng)
    loss = ce_loss(trace, y)
    grads = backward(params, trace, y)
    norm = float(np.linalg.norm(grads.em_u)) if cfg.mode == "continuous" else None
    eps_u = sut_budget(cfg, trace, y, norm) if unlearn else 0.0
    if eps_u == 0.0 or adv_weight == 0.0:
        em_grad = np.zeros_like(trace.em_u)
    else:
        em_grad = adv_weight * grl_backward(grads.em_u, eps_u)
    return AdvStepResult(em_grad, grads, eps_u, eps_u == 0.0, trace, loss)
