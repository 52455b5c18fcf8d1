"""Base optimizers exposed as direction providers.

Each provider consumes the shared per-step gradient, advances its own state,
and emits a raw update vector per parameter component. Sign convention:
every direction is a descent step, i.e. what a unit-learning-rate optimizer
would ADD to the weights.

A DirectionBank runs several providers off one backward pass, keeping their
states flat over all components for speed and exposing per-component views.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .nnlite import DivergenceError, ParamSet

NORM_FLOOR = 1e-12  # l2 norms are floored here before logs and normalization


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"
    ADAMAX = "adamax"
    LION = "lion"
    LAMB = "lamb"
    WEIGHT_DECAY = "weight_decay"


# kinds whose (beta1, beta2) are exposed to meta-learning
KINDS_WITH_BETAS = (
    OptimizerKind.ADAM,
    OptimizerKind.ADAMAX,
    OptimizerKind.LION,
    OptimizerKind.LAMB,
)

# persistent per-parameter state slots, the Memory Overhead column
STATE_SLOTS = {
    OptimizerKind.SGD: 0,
    OptimizerKind.ADAM: 2,
    OptimizerKind.ADAMAX: 2,
    OptimizerKind.LION: 1,
    OptimizerKind.LAMB: 2,
    OptimizerKind.WEIGHT_DECAY: 0,
}


@dataclass(frozen=True)
class HyperParams:
    """Scalar hyperparameters of one provider. eps is fixed, never learned."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")


def default_hyper_params(kind: OptimizerKind) -> HyperParams:
    if kind == OptimizerKind.LION:
        return HyperParams(beta1=0.9, beta2=0.99)
    return HyperParams(beta1=0.9, beta2=0.999)


def dir_sgd(grad: np.ndarray) -> np.ndarray:
    """Momentumless SGD: d = -g."""
    return -grad


def dir_adam(state: dict, grad: np.ndarray, beta1: float, beta2: float,
             eps: float, k: int) -> np.ndarray:
    """Bias-corrected Adam direction, state mutated in place.

    m <- b1*m + (1-b1)*g, v <- b2*v + (1-b2)*g^2,
    d = -(m / (1-b1^k)) / (sqrt(v / (1-b2^k)) + eps), k >= 1 post-increment.
    """
    state["m"] = beta1 * state["m"] + (1.0 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1.0 - beta2) * grad * grad
    m_hat = state["m"] / (1.0 - beta1 ** k)
    v_hat = state["v"] / (1.0 - beta2 ** k)
    return -m_hat / (np.sqrt(v_hat) + eps)


def dir_adamax(state: dict, grad: np.ndarray, beta1: float, beta2: float,
               eps: float, k: int) -> np.ndarray:
    """Adamax: infinity-norm second moment, u <- max(b2*u, |g|)."""
    state["m"] = beta1 * state["m"] + (1.0 - beta1) * grad
    state["u"] = np.maximum(beta2 * state["u"], np.abs(grad))
    m_hat = state["m"] / (1.0 - beta1 ** k)
    return -m_hat / (state["u"] + eps)


def dir_lion(state: dict, grad: np.ndarray, beta1: float, beta2: float) -> np.ndarray:
    """Lion: sign of the b1-interpolated momentum; momentum updated with b2 AFTER.

    sign(0) is 0, so entries of the output lie in {-1, 0, +1}.
    """
    c = beta1 * state["m"] + (1.0 - beta1) * grad
    d = -np.sign(c)
    state["m"] = beta2 * state["m"] + (1.0 - beta2) * grad
    return d


def dir_lamb(state: dict, grad: np.ndarray, beta1: float, beta2: float,
             eps: float, k: int, weights: np.ndarray) -> np.ndarray:
    """LAMB direction: Adam ratio scaled by the trust ratio ||w|| / ||r||.

    No weight-decay term, no clipping; the trust ratio degenerates to 1 when
    either norm is zero. The subsequent unit normalization makes the ratio
    immaterial to the blended update, so this is the simplest faithful form.
    """
    r = -dir_adam(state, grad, beta1, beta2, eps, k)
    w_norm = float(np.linalg.norm(weights))
    r_norm = float(np.linalg.norm(r))
    trust = w_norm / r_norm if w_norm > 0.0 and r_norm > 0.0 else 1.0
    return -trust * r


def dir_weight_decay(weights: np.ndarray) -> np.ndarray:
    """Pull toward the origin: d = -w."""
    return -weights


@dataclass
class DirectionSet:
    """Raw directions per component per provider, with their l2 norms.

    directions[l][p] has the shape of component l; norms and log_norms are
    [L, P], the latter computed as log(max(norm, NORM_FLOOR)).
    """

    directions: list[list[np.ndarray]]
    norms: np.ndarray
    log_norms: np.ndarray


class DirectionBank:
    """P providers sharing one gradient stream over one component structure.

    States are kept flat over all components; the per-component views handed
    out by step() alias that flat storage. A bank belongs to exactly one
    inner-loop evaluation and is never shared.
    """

    def __init__(self, kinds: list[OptimizerKind], hypers: list[HyperParams],
                 template: ParamSet):
        if len(kinds) != len(set(kinds)):
            raise ValueError("each optimizer kind may appear at most once")
        if len(hypers) != len(kinds):
            raise ValueError("one HyperParams per kind")
        self.kinds = list(kinds)
        self.hypers = list(hypers)
        self.step_count = 0
        self._shapes = [t.shape for t in template.tensors]
        sizes = [t.size for t in template.tensors]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)])
        self._n_total = int(self._offsets[-1])
        self._state: list[dict] = []
        for kind in kinds:
            slots = {}
            if kind in (OptimizerKind.ADAM, OptimizerKind.LAMB):
                slots = {"m": np.zeros(self._n_total), "v": np.zeros(self._n_total)}
            elif kind == OptimizerKind.ADAMAX:
                slots = {"m": np.zeros(self._n_total), "u": np.zeros(self._n_total)}
            elif kind == OptimizerKind.LION:
                slots = {"m": np.zeros(self._n_total)}
            self._state.append(slots)

    @property
    def n_providers(self) -> int:
        return len(self.kinds)

    def _component_views(self, flat: np.ndarray) -> list[np.ndarray]:
        return [
            flat[self._offsets[i]:self._offsets[i + 1]].reshape(shape)
            for i, shape in enumerate(self._shapes)
        ]

    def _flat_direction(self, kind: OptimizerKind, hp: HyperParams, state: dict,
                        grad_flat: np.ndarray, weights: ParamSet) -> np.ndarray:
        k = self.step_count
        if kind == OptimizerKind.SGD:
            return dir_sgd(grad_flat)
        if kind == OptimizerKind.ADAM:
            return dir_adam(state, grad_flat, hp.beta1, hp.beta2, hp.eps, k)
        if kind == OptimizerKind.ADAMAX:
            return dir_adamax(state, grad_flat, hp.beta1, hp.beta2, hp.eps, k)
        if kind == OptimizerKind.LION:
            return dir_lion(state, grad_flat, hp.beta1, hp.beta2)
        if kind == OptimizerKind.LAMB:
            # per-component trust ratios, so apply LAMB on component views
            d = -dir_adam(state, grad_flat, hp.beta1, hp.beta2, hp.eps, k)
            out = d.copy()
            for i, (a, b) in enumerate(zip(self._offsets[:-1], self._offsets[1:])):
                w_norm = float(np.linalg.norm(weights.tensors[i]))
                r_norm = float(np.linalg.norm(d[a:b]))
                trust = w_norm / r_norm if w_norm > 0.0 and r_norm > 0.0 else 1.0
                out[a:b] = -trust * d[a:b]
            return out
        if kind == OptimizerKind.WEIGHT_DECAY:
            return dir_weight_decay(weights.flat())
        raise ValueError(f"unknown optimizer kind {kind}")

    def step(self, grads: ParamSet, weights: ParamSet, loss: float) -> DirectionSet:
        """Advance every provider once and return all directions.

        grads and weights are the pre-update values for the current step;
        loss is accepted for parity with stateful providers that may use it.
        """
        del loss
        self.step_count += 1
        grad_flat = grads.flat()
        n_comp = len(self._shapes)
        directions: list[list[np.ndarray]] = [[] for _ in range(n_comp)]
        norms = np.zeros((n_comp, self.n_providers))
        for p, (kind, hp, state) in enumerate(zip(self.kinds, self.hypers, self._state)):
            with np.errstate(over="ignore", invalid="ignore"):
                flat = self._flat_direction(kind, hp, state, grad_flat, weights)
            if not np.all(np.isfinite(flat)):
                raise DivergenceError(f"non-finite {kind.value} direction")
            for i, view in enumerate(self._component_views(flat)):
                directions[i].append(view)
                norms[i, p] = np.linalg.norm(view)
        log_norms = np.log(np.maximum(norms, NORM_FLOOR))
        return DirectionSet(directions=directions, norms=norms, log_norms=log_norms)
