"""The layer-wise controller: tracks per-component training statistics,
feeds them through a small meta-parameterized MLP, and blends normalized
base-optimizer directions into per-component updates:

    delta_theta[l] = lambda[l] * sum_p mu[l, p] * dhat[l, p]

with dhat = d / ||d||_2 (zero when ||d|| underflows the norm floor). The MLP
emits P+1 logits per component: a softmax over the P mixing coefficients and
an exponential head for lambda, so mu is always a distribution and lambda is
always positive.

Meta-parameters (MLP weights, per-component embeddings, squashed base
optimizer betas) live in one flat vector so an evolution-strategies outer
loop can perturb them; flatten/unflatten is an exact bijection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import optdir
from .nnlite import DivergenceError, ParamSet
from .optdir import DirectionBank, DirectionSet, HyperParams, OptimizerKind

DEFAULT_GAMMAS = (0.0, 0.9, 0.99)
EMBED_DIM = 16
HIDDEN_1 = 32
HIDDEN_2 = 16
N_TIME_FEATURES = 15
LAMBDA_INIT = 1e-3
CHECKPOINT_VERSION = 1


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p / (1.0 - p))


@dataclass(frozen=True)
class TimeFeatureConfig:
    """Reference points for the progress features.

    11 linear alphas in [0, 1] feed tanh(10*(k/K - alpha)); 4 log-spaced
    betas in [1e-4, 1e-1] feed tanh(log(K*beta)).
    """

    alphas: tuple[float, ...] = tuple(np.arange(11) / 10.0)
    betas: tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1)


DEFAULT_TIME_CONFIG = TimeFeatureConfig()


def time_features(k: int, K: int, cfg: TimeFeatureConfig = DEFAULT_TIME_CONFIG) -> np.ndarray:
    """11 relative then 4 absolute progress features, each in (-1, 1)."""
    if K <= 0:
        raise ValueError("K must be positive")
    if not 1 <= k <= K:
        raise ValueError(f"step {k} outside 1..{K}")
    rel = np.tanh(10.0 * (k / K - np.asarray(cfg.alphas)))
    absf = np.tanh(np.log(K * np.asarray(cfg.betas)))
    return np.concatenate([rel, absf])


class EmaTracker:
    """Bias-corrected EMAs of log weight norms, log gradient norms and loss.

    Per component: log||w||_2 and log||g||_2 for every smoothing factor in
    gammas; the loss EMAs are global. Statistics must be the pre-update
    values for the step being recorded, and update() runs exactly once per
    inner step.
    """

    def __init__(self, n_components: int, gammas=DEFAULT_GAMMAS):
        self.gammas = np.asarray(tuple(gammas), dtype=float)
        if len(self.gammas) > 0 and (self.gammas.min() < 0 or self.gammas.max() >= 1):
            raise ValueError("gammas must lie in [0, 1)")
        self.n_components = n_components
        self.k = 0
        self._comp = np.zeros((n_components, 2, len(self.gammas)))
        self._loss = np.zeros(len(self.gammas))

    def update(self, loss: float, comp_stats: np.ndarray) -> None:
        """comp_stats is [L, 2]: (log||w||, log||g||) per component."""
        if comp_stats.shape != (self.n_components, 2):
            raise ValueError("component statistics have the wrong shape")
        self.k += 1
        if len(self.gammas) == 0:
            return
        g = self.gammas
        self._comp = g[None, None, :] * self._comp + (1.0 - g)[None, None, :] * comp_stats[:, :, None]
        self._loss = g * self._loss + (1.0 - g) * loss

    def read(self) -> tuple[np.ndarray, np.ndarray]:
        """Corrected EMAs: ([L, 2, n_gammas], [n_gammas]). Errors before any update."""
        if self.k == 0:
            raise ValueError("no samples recorded yet")
        if len(self.gammas) == 0:
            return self._comp.copy(), self._loss.copy()
        corr = 1.0 - self.gammas ** self.k  # gamma == 0 gives divisor 1 for k >= 1
        return self._comp / corr[None, None, :], self._loss / corr


class Variant(str, Enum):
    FULL = "full"                  # shared MLP + per-component embeddings
    NO_EMBEDDING = "no_embedding"  # shared MLP, embedding slots removed
    PER_LAYER_MLP = "per_layer_mlp"  # one MLP per component, no embeddings
    GLOBAL = "global"              # one MLP on whole-model statistics


@dataclass(frozen=True)
class PsiLayout:
    """Shape of the flat meta-parameter vector for one configuration."""

    n_components: int
    base_kinds: tuple[OptimizerKind, ...]
    gammas: tuple[float, ...] = DEFAULT_GAMMAS
    variant: Variant = Variant.FULL

    def __post_init__(self):
        object.__setattr__(self, "base_kinds", tuple(OptimizerKind(k) for k in self.base_kinds))
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        object.__setattr__(self, "variant", Variant(self.variant))
        if len(self.base_kinds) < 1:
            raise ValueError("need at least one base optimizer")
        if len(set(self.base_kinds)) != len(self.base_kinds):
            raise ValueError("duplicate base optimizer kind")
        if self.n_components < 1:
            raise ValueError("need at least one component")

    @property
    def n_providers(self) -> int:
        return len(self.base_kinds)

    @property
    def feature_dim(self) -> int:
        f = 3 * len(self.gammas) + N_TIME_FEATURES + self.n_providers
        if self.variant == Variant.FULL:
            f += EMBED_DIM
        return f

    @property
    def n_mlps(self) -> int:
        return self.n_components if self.variant == Variant.PER_LAYER_MLP else 1

    @property
    def mlp_shapes(self) -> tuple[tuple[int, ...], ...]:
        p = self.n_providers
        f = self.feature_dim
        return ((f, HIDDEN_1), (HIDDEN_1,), (HIDDEN_1, HIDDEN_2), (HIDDEN_2,),
                (HIDDEN_2, p + 1), (p + 1,))

    @property
    def mlp_size(self) -> int:
        return sum(int(np.prod(s)) for s in self.mlp_shapes)

    @property
    def n_hyper(self) -> int:
        return 2 * sum(1 for k in self.base_kinds if k in optdir.KINDS_WITH_BETAS)

    @property
    def embedding_size(self) -> int:
        return EMBED_DIM * self.n_components if self.variant == Variant.FULL else 0

    @property
    def flat_size(self) -> int:
        return self.n_mlps * self.mlp_size + self.embedding_size + self.n_hyper

    def to_dict(self) -> dict:
        return {
            "n_components": self.n_components,
            "base_optimizers": [k.value for k in self.base_kinds],
            "gammas": list(self.gammas),
            "variant": self.variant.value,
        }

    @staticmethod
    def from_dict(d: dict) -> "PsiLayout":
        return PsiLayout(
            n_components=int(d["n_components"]),
            base_kinds=tuple(OptimizerKind(k) for k in d["base_optimizers"]),
            gammas=tuple(float(g) for g in d["gammas"]),
            variant=Variant(d["variant"]),
        )


@dataclass
class Mlp:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def arrays(self):
        return (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)


@dataclass
class MetaParams:
    """Structured view of one flat meta-parameter vector.

    All arrays alias ``flat``, so unflatten(flatten(psi)) round-trips bit
    for bit and NES can perturb the flat vector directly.
    """

    layout: PsiLayout
    flat: np.ndarray
    mlps: list[Mlp]
    embeddings: np.ndarray | None
    hyper_raw: np.ndarray


def flatten(psi: MetaParams) -> np.ndarray:
    return psi.flat.copy()


def unflatten(vec: np.ndarray, layout: PsiLayout) -> MetaParams:
    """Views into ``vec``: MLPs (w1,b1,w2,b2,w3,b3 each), embeddings row-major,
    then raw hyperparameters in declaration order."""
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (layout.flat_size,):
        raise ValueError(f"flat vector has length {vec.shape}, expected {layout.flat_size}")
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        out = vec[offset:offset + n].reshape(shape)
        offset += n
        return out

    mlps = [Mlp(*(take(s) for s in layout.mlp_shapes)) for _ in range(layout.n_mlps)]
    embeddings = None
    if layout.variant == Variant.FULL:
        embeddings = take((layout.n_components, EMBED_DIM))
    hyper_raw = take((layout.n_hyper,))
    return MetaParams(layout=layout, flat=vec, mlps=mlps,
                      embeddings=embeddings, hyper_raw=hyper_raw)


def init_meta_params(layout: PsiLayout, seed: int) -> MetaParams:
    """Fresh meta-parameters.

    Hidden weights are LeCun normal and the output layer is zero, so a new
    controller mixes uniformly and steps with lambda = LAMBDA_INIT until
    meta-training shapes it. Raw hyperparameters start at the conventional
    defaults of each base optimizer, squashed through the inverse sigmoid.
    """
    rng = np.random.default_rng(seed)
    psi = unflatten(np.zeros(layout.flat_size), layout)
    for mlp in psi.mlps:
        mlp.w1[:] = rng.normal(0.0, 1.0 / np.sqrt(layout.feature_dim), mlp.w1.shape)
        mlp.w2[:] = rng.normal(0.0, 1.0 / np.sqrt(HIDDEN_1), mlp.w2.shape)
        mlp.b3[layout.n_providers] = math.log(LAMBDA_INIT)
    if psi.embeddings is not None:
        psi.embeddings[:] = rng.normal(0.0, 0.1, psi.embeddings.shape)
    idx = 0
    for kind in layout.base_kinds:
        if kind in optdir.KINDS_WITH_BETAS:
            hp = optdir.default_hyper_params(kind)
            psi.hyper_raw[idx] = logit(hp.beta1)
            psi.hyper_raw[idx + 1] = logit(hp.beta2)
            idx += 2
    return psi


def hyper_params_of(psi: MetaParams) -> list[HyperParams]:
    """Squash the raw scalars into (0,1) betas, one HyperParams per kind."""
    out = []
    idx = 0
    for kind in psi.layout.base_kinds:
        if kind in optdir.KINDS_WITH_BETAS:
            b1 = float(sigmoid(psi.hyper_raw[idx]))
            b2 = float(sigmoid(psi.hyper_raw[idx + 1]))
            idx += 2
            out.append(HyperParams(beta1=b1, beta2=b2))
        else:
            out.append(optdir.default_hyper_params(kind))
    return out


def build_features(ema_comp: np.ndarray, ema_loss: np.ndarray, tf: np.ndarray,
                   embeddings: np.ndarray | None, dir_log_norms: np.ndarray) -> np.ndarray:
    """Frames [L, F] in the fixed order (EMA | time | embedding | dir norms).

    The EMA block is log||w|| EMAs, then log||g|| EMAs, then loss EMAs, each
    over the configured gammas in order.
    """
    n = ema_comp.shape[0]
    parts = [
        ema_comp[:, 0, :],
        ema_comp[:, 1, :],
        np.tile(ema_loss, (n, 1)),
        np.tile(tf, (n, 1)),
    ]
    if embeddings is not None:
        parts.append(embeddings)
    parts.append(dir_log_norms)
    return np.concatenate(parts, axis=1)


def controller_forward(mlp: Mlp, features: np.ndarray) -> tuple[np.ndarray, float]:
    """(mu, lambda) for one feature frame. mu is a max-shifted softmax over
    the first P logits; lambda = exp of the last logit."""
    mu, lam = controller_forward_batch(mlp, features[None, :])
    return mu[0], float(lam[0])


def controller_forward_batch(mlp: Mlp, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if frames.shape[1] != mlp.w1.shape[0]:
        raise ValueError(
            f"feature frames have width {frames.shape[1]}, MLP expects {mlp.w1.shape[0]}"
        )
    with np.errstate(over="ignore", invalid="ignore"):
        h = np.maximum(frames @ mlp.w1 + mlp.b1, 0.0)
        h = np.maximum(h @ mlp.w2 + mlp.b2, 0.0)
        logits = h @ mlp.w3 + mlp.b3
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("controller produced non-finite logits")
    mix = logits[:, :-1]
    mix = mix - mix.max(axis=1, keepdims=True)
    e = np.exp(mix)
    mu = e / e.sum(axis=1, keepdims=True)
    with np.errstate(over="ignore"):
        lam = np.exp(logits[:, -1])
    if not np.all(np.isfinite(lam)):
        raise DivergenceError("controller step size overflowed")
    return mu, lam


def compose_update(lam: float, mu: np.ndarray, dirs: list[np.ndarray],
                   norms: np.ndarray | None = None,
                   renormalize: bool = False) -> np.ndarray:
    """lambda-scaled convex blend of unit directions for one component.

    Directions with norm below NORM_FLOOR contribute zero. With
    ``renormalize`` the blend itself is rescaled to unit norm before lambda,
    making lambda the exact update norm rather than an upper bound; off by
    default.
    """
    if norms is None:
        norms = np.array([np.linalg.norm(d) for d in dirs])
    out = np.zeros_like(dirs[0])
    for p, d in enumerate(dirs):
        if norms[p] >= optdir.NORM_FLOOR:
            out += (mu[p] / norms[p]) * d
    if renormalize:
        blend_norm = float(np.linalg.norm(out))
        if blend_norm >= optdir.NORM_FLOOR:
            out /= blend_norm
    return lam * out


class ControllerContext:
    """Everything one inner-loop evaluation needs: the direction bank, the
    EMA tracker and a read-only view of the meta-parameters.

    ``policy`` replaces the MLP head when set: it receives the component
    index and that component's direction log-norms and returns (mu, lambda).
    Used by equivalence tests to force known optimizers through the update
    path.
    """

    def __init__(self, psi: MetaParams, template: ParamSet, K: int,
                 time_cfg: TimeFeatureConfig = DEFAULT_TIME_CONFIG,
                 renormalize: bool = False, policy=None):
        layout = psi.layout
        n_comp = len(template)
        if layout.variant != Variant.GLOBAL and layout.n_components != n_comp:
            raise ValueError(
                f"layout built for {layout.n_components} components, model has {n_comp}"
            )
        self.psi = psi
        self.layout = layout
        self.K = K
        self.time_cfg = time_cfg
        self.renormalize = renormalize
        self.policy = policy
        self.bank = DirectionBank(list(layout.base_kinds), hyper_params_of(psi), template)
        tracked = 1 if layout.variant == Variant.GLOBAL else n_comp
        self.tracker = EmaTracker(tracked, layout.gammas)
        self.n_model_components = n_comp

    def _stats(self, weights: ParamSet, grads: ParamSet) -> np.ndarray:
        w_norms = np.array([np.linalg.norm(t) for t in weights.tensors])
        g_norms = np.array([np.linalg.norm(t) for t in grads.tensors])
        if self.layout.variant == Variant.GLOBAL:
            w_norms = np.array([np.sqrt(np.sum(w_norms ** 2))])
            g_norms = np.array([np.sqrt(np.sum(g_norms ** 2))])
        stats = np.stack([w_norms, g_norms], axis=1)
        return np.log(np.maximum(stats, optdir.NORM_FLOOR))

    def decide(self, dirs: DirectionSet, loss: float, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(mu [L, P], lambda [L]) for the current step, after the tracker
        has been updated with this step's statistics."""
        layout = self.layout
        n_comp = self.n_model_components
        if self.policy is not None:
            mu = np.zeros((n_comp, layout.n_providers))
            lam = np.zeros(n_comp)
            for i in range(n_comp):
                mu[i], lam[i] = self.policy(i, dirs.log_norms[i])
            return mu, lam

        ema_comp, ema_loss = self.tracker.read()
        tf = time_features(k, self.K, self.time_cfg)
        if layout.variant == Variant.GLOBAL:
            whole = 0.5 * np.log(np.maximum(np.sum(dirs.norms ** 2, axis=0),
                                            optdir.NORM_FLOOR ** 2))
            frames = build_features(ema_comp, ema_loss, tf, None, whole[None, :])
            mu, lam = controller_forward_batch(self.psi.mlps[0], frames)
            return np.tile(mu, (n_comp, 1)), np.full(n_comp, lam[0])
        frames = build_features(ema_comp, ema_loss, tf, self.psi.embeddings,
                                dirs.log_norms)
        if layout.variant == Variant.PER_LAYER_MLP:
            mu = np.zeros((n_comp, layout.n_providers))
            lam = np.zeros(n_comp)
            for i in range(n_comp):
                mu[i], lam[i] = controller_forward(self.psi.mlps[i], frames[i])
            return mu, lam
        return controller_forward_batch(self.psi.mlps[0], frames)

    def step(self, params: ParamSet, grads: ParamSet, loss: float, k: int) -> tuple[ParamSet, np.ndarray, np.ndarray]:
        """One update: returns (new params, mu [L, P], lambda [L]).

        Order of effects: directions from pre-update weights and gradients,
        then the EMA recursion on pre-update statistics, then the controller
        and the composed update.
        """
        dirs = self.bank.step(grads, params, loss)
        self.tracker.update(loss, self._stats(params, grads))
        mu, lam = self.decide(dirs, loss, k)
        new_tensors = []
        for i, t in enumerate(params.tensors):
            delta = compose_update(float(lam[i]), mu[i], dirs.directions[i],
                                   norms=dirs.norms[i], renormalize=self.renormalize)
            new_tensors.append(t + delta)
        return ParamSet(list(params.ids), new_tensors), mu, lam


def l3rs_step(ctx: ControllerContext, params: ParamSet, grads: ParamSet,
              loss: float, k: int) -> ParamSet:
    """Apply one controller update; the context carries K and all state."""
    new_params, _, _ = ctx.step(params, grads, loss, k)
    return new_params


def save_psi(path, psi: MetaParams, extra: dict | None = None) -> None:
    """Checkpoint the flat vector as decimal text, 17 significant digits.

    float64 -> %.17g -> float64 is the identity, so loads are value-exact.
    """
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "layout": psi.layout.to_dict(),
        "psi": [format(v, ".17g") for v in psi.flat],
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_psi(path) -> tuple[MetaParams, dict]:
    """Load a checkpoint; returns (psi, full document) for callers that need
    the extra fields. Rejects unknown format versions."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
    layout = PsiLayout.from_dict(doc["layout"])
    flat = np.array([float(v) for v in doc["psi"]])
    return unflatten(flat, layout), doc
