"""Task distributions, the inner-loop evaluator, and the evolution-strategies
outer loop that meta-trains controller parameters.

A task is (initial weights, K training batches, one evaluation batch).
Tasks are synthetic Gaussian-blob classification problems: class means drawn
uniformly in [-1, 1]^d with isotropic noise, carved into disjoint pretrain /
meta-train / meta-test class splits so meta-testing sees unseen classes.

Everything is reconstructible from integer seeds: a task regenerates bit for
bit from (distribution, task seed), and one meta-training generation is a
pure function of (config seed, generation), which is what makes runs
resumable and independent of worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .controller import (
    ControllerContext,
    PsiLayout,
    flatten,
    init_meta_params,
    unflatten,
)
from .nnlite import (
    Batch,
    DivergenceError,
    NetworkSpec,
    ParamSet,
    accuracy,
    forward,
    init_params,
    loss_and_grad,
    mean_cross_entropy,
)

DIVERGENCE_PENALTY = 1e4

_MASK = (1 << 63) - 1

# stream tags keep derived RNGs disjoint
_TAG_CLASSES = 1
_TAG_K = 2
_TAG_BATCH = 3
_TAG_EVAL = 4
_TAG_INIT = 5
_TAG_TASK_SEEDS = 6
_TAG_NES_EPS = 7
_TAG_PRETRAIN = 9
_TAG_PRETRAIN_EVAL = 10


def derived_rng(*parts: int) -> np.random.Generator:
    """Deterministic generator for a tuple of integer stream coordinates."""
    return np.random.default_rng(np.random.SeedSequence([int(p) & _MASK for p in parts]))


@dataclass(frozen=True)
class TaskDistributionSpec:
    """Synthetic blob classifier family plus its class split and task shape."""

    input_dim: int = 16
    total_classes: int = 16
    blob_std: float = 0.75
    generator_seed: int = 0
    pretrain_classes: int = 8
    metatrain_classes: int = 4
    metatest_classes: int = 4
    classes_per_task: int = 4
    hidden: tuple[int, ...] = (32,)
    train_batch_size: int = 32
    eval_batch_size: int = 256
    k_min: int = 5
    k_max: int = 25

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        used = self.pretrain_classes + self.metatrain_classes + self.metatest_classes
        if used > self.total_classes:
            raise ValueError("class splits exceed total_classes")
        for size in (self.metatrain_classes, self.metatest_classes):
            if self.classes_per_task > size:
                raise ValueError("classes_per_task exceeds a split size")
        if not (1 <= self.k_min <= self.k_max):
            raise ValueError("bad K range")
        if self.blob_std <= 0:
            raise ValueError("blob_std must be positive")

    def class_means(self) -> np.ndarray:
        rng = derived_rng(self.generator_seed)
        return rng.uniform(-1.0, 1.0, (self.total_classes, self.input_dim))

    def split_classes(self, split: str) -> np.ndarray:
        p, mtr, mte = self.pretrain_classes, self.metatrain_classes, self.metatest_classes
        if split == "pretrain":
            return np.arange(0, p)
        if split == "metatrain":
            return np.arange(p, p + mtr)
        if split == "metatest":
            return np.arange(p + mtr, p + mtr + mte)
        raise ValueError(f"unknown split {split!r}")

    def task_network(self) -> NetworkSpec:
        return NetworkSpec(self.input_dim, self.hidden, self.classes_per_task)

    def pretrain_network(self) -> NetworkSpec:
        return NetworkSpec(self.input_dim, self.hidden, self.pretrain_classes)


@dataclass
class Task:
    """One fine-tuning problem: theta0, K train batches, one eval batch."""

    spec: NetworkSpec
    theta0: ParamSet
    train_batches: list[Batch]
    eval_batch: Batch
    K: int
    seed: int
    class_ids: tuple[int, ...]
    split: str


def _blob_batch(dist: TaskDistributionSpec, means: np.ndarray,
                class_ids: np.ndarray, n: int, rng: np.random.Generator) -> Batch:
    y = rng.integers(0, len(class_ids), n)
    x = means[class_ids[y]] + dist.blob_std * rng.standard_normal((n, dist.input_dim))
    return Batch(x=x, y=y)


def make_task(dist: TaskDistributionSpec, seed: int, split: str = "metatrain",
              init_from: ParamSet | None = None, k_override: int | None = None) -> Task:
    """Build the task identified by ``seed``, bit-identical on every call.

    ``init_from`` is a pretrained checkpoint whose body is copied; the head
    is re-initialized whenever its output width differs from the task's
    class count (the usual fine-tuning head swap). Without a checkpoint the
    whole model is freshly initialized. ``k_override`` forces the horizon,
    and the train batches for a given seed are a common prefix across
    horizons.
    """
    means = dist.class_means()
    pool = dist.split_classes(split)
    class_rng = derived_rng(dist.generator_seed, seed, _TAG_CLASSES)
    class_ids = np.sort(class_rng.choice(pool, dist.classes_per_task, replace=False))

    if k_override is not None:
        k = int(k_override)
        if k < 0:
            raise ValueError("K override must be >= 0")
    else:
        k_rng = derived_rng(dist.generator_seed, seed, _TAG_K)
        k = int(k_rng.integers(dist.k_min, dist.k_max + 1))

    spec = dist.task_network()
    init_rng = derived_rng(dist.generator_seed, seed, _TAG_INIT)
    if init_from is None:
        theta0 = init_params(spec, int(init_rng.integers(0, _MASK)))
    else:
        theta0 = ParamSet(spec.components(), [t.copy() for t in init_from.tensors])
        head_kernel = theta0.tensors[-2]
        if head_kernel.shape[1] != dist.classes_per_task:
            fan_in = head_kernel.shape[0]
            theta0.tensors[-2] = init_rng.normal(
                0.0, 1.0 / np.sqrt(fan_in), (fan_in, dist.classes_per_task))
            theta0.tensors[-1] = np.zeros(dist.classes_per_task)

    train_batches = [
        _blob_batch(dist, means, class_ids, dist.train_batch_size,
                    derived_rng(dist.generator_seed, seed, _TAG_BATCH, i))
        for i in range(k)
    ]
    eval_batch = _blob_batch(dist, means, class_ids, dist.eval_batch_size,
                             derived_rng(dist.generator_seed, seed, _TAG_EVAL))
    return Task(spec=spec, theta0=theta0, train_batches=train_batches,
                eval_batch=eval_batch, K=k, seed=int(seed),
                class_ids=tuple(int(c) for c in class_ids), split=split)


def sample_task(dist: TaskDistributionSpec, rng: np.random.Generator,
                split: str = "metatrain", init_from: ParamSet | None = None,
                k_override: int | None = None) -> Task:
    """Draw a task seed from ``rng`` and build that task."""
    seed = int(rng.integers(0, _MASK))
    return make_task(dist, seed, split=split, init_from=init_from, k_override=k_override)


@dataclass
class TrajectoryRow:
    step: int
    component: str
    mu: tuple[float, ...]
    lam: float
    train_loss: float


@dataclass
class InnerRunResult:
    meta_loss: float
    eval_accuracy: float
    train_losses: list[float]
    diverged: bool = False
    trajectory: list[TrajectoryRow] | None = None


class ControllerStepper:
    """Adapts a ControllerContext to the stepper protocol used by the
    evaluator; records per-component (mu, lambda) rows when asked."""

    def __init__(self, ctx: ControllerContext, record: bool):
        self.ctx = ctx
        self.rows: list[TrajectoryRow] | None = [] if record else None

    def step(self, params: ParamSet, grads: ParamSet, loss: float, k: int) -> ParamSet:
        new_params, mu, lam = self.ctx.step(params, grads, loss, k)
        if self.rows is not None:
            for i, cid in enumerate(params.ids):
                self.rows.append(TrajectoryRow(
                    step=k, component=cid.name,
                    mu=tuple(float(v) for v in mu[i]),
                    lam=float(lam[i]), train_loss=loss))
        return new_params


def controller_stepper_factory(psi_flat: np.ndarray, layout: PsiLayout,
                               renormalize: bool = False, policy=None):
    """Stepper factory for a flat meta-parameter vector.

    The returned callable takes (task, record=False) and yields a fresh
    stepper with zeroed optimizer and tracker state, as a new fine-tuning
    run requires.
    """
    psi_flat = np.asarray(psi_flat, dtype=float)

    def make(task: Task, record: bool = False) -> ControllerStepper:
        psi = unflatten(psi_flat, layout)
        ctx = ControllerContext(psi, task.theta0, task.K,
                                renormalize=renormalize, policy=policy)
        return ControllerStepper(ctx, record)

    return make


def inner_loop_eval(make_stepper, task: Task, record_trajectory: bool = False) -> InnerRunResult:
    """Run exactly K steps, one train batch each, then score the eval batch.

    Divergence (non-finite loss, gradient or direction) yields the penalty
    meta-loss rather than an exception so outer-loop fitness stays defined.
    """
    params = task.theta0.copy()
    stepper = make_stepper(task, record_trajectory)
    train_losses: list[float] = []
    penalized = InnerRunResult(meta_loss=DIVERGENCE_PENALTY, eval_accuracy=0.0,
                               train_losses=train_losses, diverged=True,
                               trajectory=getattr(stepper, "rows", None))
    for k in range(1, task.K + 1):
        try:
            loss, grads = loss_and_grad(task.spec, params, task.train_batches[k - 1])
        except DivergenceError:
            return penalized
        train_losses.append(loss)
        try:
            params = stepper.step(params, grads, loss, k)
        except DivergenceError:
            return penalized
    logits = forward(task.spec, params, task.eval_batch.x)
    meta_loss = mean_cross_entropy(logits, task.eval_batch.y)
    if not np.isfinite(meta_loss):
        return penalized
    return InnerRunResult(meta_loss=float(meta_loss),
                          eval_accuracy=accuracy(logits, task.eval_batch.y),
                          train_losses=train_losses,
                          trajectory=getattr(stepper, "rows", None))


def fitness(psi_flat: np.ndarray, layout: PsiLayout, tasks: list[Task],
            renormalize: bool = False) -> float:
    """Negative mean meta-loss of one candidate over a batch of tasks."""
    factory = controller_stepper_factory(psi_flat, layout, renormalize=renormalize)
    losses = [inner_loop_eval(factory, t).meta_loss for t in tasks]
    return -float(np.mean(losses))


def shaped_utilities(fitnesses) -> np.ndarray:
    """Centered-rank fitness shaping: ranks ascending (ties broken by
    candidate index), mapped to rank/(c-1) - 0.5, returned in input order."""
    f = np.asarray(fitnesses, dtype=float)
    c = len(f)
    if c < 2:
        raise ValueError("need at least two candidates")
    order = np.argsort(f, kind="stable")
    ranks = np.empty(c)
    ranks[order] = np.arange(c)
    return ranks / (c - 1) - 0.5


@dataclass(frozen=True)
class NesConfig:
    """Outer-loop settings. ``alpha0`` is a step size in parameter units:
    the update applies rank utilities to the actual candidate offsets, so
    the noise scale sigma cancels out of the update magnitude."""

    population: int = 32
    meta_batch: int = 4
    generations: int = 2000
    sigma0: float = 0.05
    alpha0: float = 0.1
    decay_period: int = 500
    decay_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.population < 2 or self.population % 2 != 0:
            raise ValueError("population must be even and >= 2 (antithetic pairs)")
        if self.sigma0 <= 0 or self.alpha0 <= 0:
            raise ValueError("sigma0 and alpha0 must be positive")
        if self.meta_batch < 1 or self.generations < 0 or self.decay_period < 1:
            raise ValueError("bad NES configuration")

    def schedule(self, generation: int) -> tuple[float, float]:
        """(alpha, sigma) for a 0-based generation index; both follow the
        same smooth exponential decay, halving once per decay period."""
        scale = self.decay_factor ** (generation / self.decay_period)
        return self.alpha0 * scale, self.sigma0 * scale


@dataclass
class GenerationStats:
    generation: int
    mean_fitness: float
    best_fitness: float
    alpha: float
    sigma: float


@dataclass
class NesState:
    psi: np.ndarray
    generation: int = 0
    history: list[GenerationStats] = field(default_factory=list)


def nes_update(psi: np.ndarray, signed_eps: np.ndarray, fitnesses: np.ndarray,
               alpha: float) -> np.ndarray:
    """psi + (alpha/c) * sum_i u_i * eps_i over the signed unit perturbations."""
    u = shaped_utilities(fitnesses)
    return psi + (alpha / len(fitnesses)) * (u @ signed_eps)


def generation_perturbations(cfg: NesConfig, generation: int, dim: int) -> np.ndarray:
    """The c signed unit perturbations of one generation: c/2 Gaussian draws
    followed by their negations, so the multiset sums to zero exactly."""
    eps = derived_rng(cfg.seed, _TAG_NES_EPS, generation).standard_normal(
        (cfg.population // 2, dim))
    return np.concatenate([eps, -eps], axis=0)


def nes_generation(state: NesState, cfg: NesConfig, eval_candidates) -> NesState:
    """One generation: antithetic Gaussian candidates, shared fitness
    evaluation, rank-shaped update. ``eval_candidates(candidates,
    generation)`` returns the fitness of every row.

    Mutates and returns ``state``; the whole generation is a deterministic
    function of (cfg.seed, state.generation, state.psi).
    """
    gen = state.generation
    alpha, sigma = cfg.schedule(gen)
    signed = generation_perturbations(cfg, gen, len(state.psi))
    candidates = state.psi[None, :] + sigma * signed
    fits = np.asarray(eval_candidates(candidates, gen), dtype=float)
    if fits.shape != (cfg.population,):
        raise ValueError("candidate evaluator returned the wrong number of fitnesses")
    state.psi = nes_update(state.psi, signed, fits, alpha)
    state.generation = gen + 1
    state.history.append(GenerationStats(
        generation=state.generation, mean_fitness=float(fits.mean()),
        best_fitness=float(fits.max()), alpha=alpha, sigma=sigma))
    return state


def generation_task_seeds(cfg: NesConfig, generation: int) -> list[int]:
    """The meta-batch task seeds for one generation, shared by every
    candidate (common random numbers across the population)."""
    rng = derived_rng(cfg.seed, _TAG_TASK_SEEDS, generation)
    return [int(s) for s in rng.integers(0, _MASK, cfg.meta_batch)]


# ---------------------------------------------------------------------------
# candidate evaluation, sequential or in a process pool

_WORKER_ENV: dict = {}


def _init_worker(dist, layout, init_from, split, renormalize):
    _WORKER_ENV.update(dist=dist, layout=layout, init_from=init_from,
                       split=split, renormalize=renormalize, task_cache={})


def _eval_candidate_job(args):
    index, cand, task_seeds = args
    env = _WORKER_ENV
    cache = env["task_cache"]
    losses = []
    factory = controller_stepper_factory(cand, env["layout"],
                                         renormalize=env["renormalize"])
    for seed in task_seeds:
        if seed not in cache:
            if len(cache) > 64:
                cache.clear()
            cache[seed] = make_task(env["dist"], seed, split=env["split"],
                                    init_from=env["init_from"])
        losses.append(inner_loop_eval(factory, cache[seed]).meta_loss)
    return index, losses


class CandidateEvaluator:
    """Evaluates a population against the generation's shared task batch,
    sequentially or across worker processes. Fitness order never depends on
    the worker count because results are reduced by candidate index."""

    def __init__(self, cfg: NesConfig, dist: TaskDistributionSpec, layout: PsiLayout,
                 init_from: ParamSet | None, split: str = "metatrain",
                 renormalize: bool = False, workers: int = 1):
        self.cfg = cfg
        self.dist = dist
        self.layout = layout
        self.init_from = init_from
        self.split = split
        self.renormalize = renormalize
        self.workers = max(1, int(workers))
        self._pool = None
        if self.workers > 1:
            self._pool = ProcessPoolExecutor(
                max_workers=self.workers, initializer=_init_worker,
                initargs=(dist, layout, init_from, split, renormalize))
        else:
            _init_worker(dist, layout, init_from, split, renormalize)

    def __call__(self, candidates: np.ndarray, generation: int) -> np.ndarray:
        seeds = generation_task_seeds(self.cfg, generation)
        jobs = [(i, candidates[i], seeds) for i in range(len(candidates))]
        fits = np.zeros(len(candidates))
        if self._pool is None:
            results = map(_eval_candidate_job, jobs)
        else:
            results = self._pool.map(_eval_candidate_job, jobs)
        for index, losses in results:
            fits[index] = -float(np.mean(losses))
        return fits

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def initial_psi(cfg: NesConfig, layout: PsiLayout) -> np.ndarray:
    return flatten(init_meta_params(layout, cfg.seed))


def meta_train(cfg: NesConfig, dist: TaskDistributionSpec, layout: PsiLayout,
               init_from: ParamSet | None = None, workers: int = 1,
               state: NesState | None = None, split: str = "metatrain",
               renormalize: bool = False,
               on_generation=None) -> tuple[np.ndarray, list[GenerationStats]]:
    """Run the outer loop for cfg.generations total generations.

    ``state`` may come from a checkpoint; the loop continues from
    state.generation and reproduces an uninterrupted run exactly.
    ``on_generation(state)`` fires after every generation (checkpoint hook).
    """
    if state is None:
        state = NesState(psi=initial_psi(cfg, layout))
    with CandidateEvaluator(cfg, dist, layout, init_from, split=split,
                            renormalize=renormalize, workers=workers) as ev:
        while state.generation < cfg.generations:
            nes_generation(state, cfg, ev)
            if on_generation is not None:
                on_generation(state)
    return state.psi, state.history


def pretrain_checkpoint(dist: TaskDistributionSpec, steps: int, seed: int) -> ParamSet:
    """Train a fresh model on the pretrain split with plain Adam (lr 1e-3,
    constant) for ``steps`` steps; deterministic in ``seed``."""
    spec = dist.pretrain_network()
    params = init_params(spec, int(derived_rng(seed, _TAG_INIT).integers(0, _MASK)))
    if steps == 0:
        return params
    means = dist.class_means()
    pool = dist.split_classes("pretrain")
    m = [np.zeros_like(t) for t in params.tensors]
    v = [np.zeros_like(t) for t in params.tensors]
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    for k in range(1, steps + 1):
        batch = _blob_batch(dist, means, pool, dist.train_batch_size,
                            derived_rng(dist.generator_seed, seed, _TAG_PRETRAIN, k))
        _, grads = loss_and_grad(spec, params, batch)
        for i, g in enumerate(grads.tensors):
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            params.tensors[i] = params.tensors[i] - lr * (
                m[i] / (1 - b1 ** k)) / (np.sqrt(v[i] / (1 - b2 ** k)) + eps)
    return params


def pretrain_eval(dist: TaskDistributionSpec, params: ParamSet, seed: int,
                  n: int = 512) -> tuple[float, float]:
    """(loss, accuracy) of a pretrain-split model on a held-out batch."""
    spec = dist.pretrain_network()
    batch = _blob_batch(dist, dist.class_means(), dist.split_classes("pretrain"),
                        n, derived_rng(dist.generator_seed, seed, _TAG_PRETRAIN_EVAL))
    logits = forward(spec, params, batch.x)
    return mean_cross_entropy(logits, batch.y), accuracy(logits, batch.y)


def save_pretrained(path, spec: NetworkSpec, params: ParamSet) -> None:
    """Model checkpoint as decimal text; value-exact on reload."""
    import json

    doc = {
        "format_version": 1,
        "network": {"input_dim": spec.input_dim, "hidden": list(spec.hidden),
                    "output_dim": spec.output_dim},
        "values": [format(v, ".17g") for v in params.flat()],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_pretrained(path) -> tuple[NetworkSpec, ParamSet]:
    import json

    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != 1:
        raise ValueError("unsupported checkpoint version")
    net = doc["network"]
    spec = NetworkSpec(int(net["input_dim"]), tuple(net["hidden"]), int(net["output_dim"]))
    flat = np.array([float(v) for v in doc["values"]])
    tensors = []
    offset = 0
    for shape in spec.component_shapes():
        n = int(np.prod(shape))
        tensors.append(flat[offset:offset + n].reshape(shape).copy())
        offset += n
    if offset != len(flat):
        raise ValueError("checkpoint does not match its declared network")
    return spec, ParamSet(spec.components(), tensors)
