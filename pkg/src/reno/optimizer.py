"""The noise-optimization loop.

Each iteration regenerates the image from the current noise, scores it, takes
the gradient of ``lambda_reg * K(eps) + R`` w.r.t. the noise, clips its norm,
and applies a heavy-ball momentum step::

    v_t     = momentum * v_{t-1} + learning_rate * clip(grad_t)
    eps_t+1 = eps_t + v_t

The loop runs for t = 0 .. steps inclusive, i.e. ``steps + 1`` evaluations, and
returns the image with the highest reward seen (earliest on ties). The reward
used for selection excludes the regularizer.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .criteria import CriterionSpec, chi_norm_logpdf, combined_reward, full_objective
from .generators import GeneratorSpec, NoiseVector, PromptEmbedding, generate

log = logging.getLogger(__name__)

__all__ = [
    "NumericAbort",
    "OptimizerConfig",
    "BestIterate",
    "OptimizerState",
    "TrajectoryRow",
    "RunRecord",
    "sample_standard_normal",
    "grad_norm_clip",
    "init_state",
    "reno_step",
    "reno_run",
]


class NumericAbort(RuntimeError):
    """The objective or its gradient became non-finite during a run."""

    def __init__(self, t: int, per_term: Optional[dict], cause: Exception):
        self.t = t
        self.per_term = per_term
        super().__init__(f"non-finite objective at t={t}; per-term rewards: {per_term}; cause: {cause}")


@dataclass(frozen=True)
class OptimizerConfig:
    steps: int = 50
    learning_rate: float = 5.0
    momentum: float = 0.9
    clip_norm: float = 0.1
    lambda_reg: float = 0.01
    seed: int = 0
    # off by default: the reference listing is plain heavy-ball
    nesterov: bool = False
    # "reward" selects on R_t (regularizer excluded); "objective" on J_t
    select_on: str = "reward"

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError("steps must be a non-negative integer")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        if not self.lambda_reg >= 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.select_on not in ("reward", "objective"):
            raise ValueError("select_on must be 'reward' or 'objective'")

    @classmethod
    def large_image(cls, **kw) -> "OptimizerConfig":
        """Defaults for the 1024-pixel regime (learning rate 10)."""
        kw.setdefault("learning_rate", 10.0)
        return cls(**kw)


def sample_standard_normal(d: int, seed: int) -> NoiseVector:
    """Standard-normal noise by the Box-Muller transform on PCG64 uniforms.

    Uniform pairs (u1, u2) are drawn as ``1 - random()`` (so u1 is in (0, 1])
    and ``random()``; each pair gives ``sqrt(-2 ln u1) * cos(2 pi u2)`` and the
    matching sine. Identical seeds give identical vectors.
    """
    if d < 2:
        raise ValueError("d must be at least 2")
    rng = np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))
    n = (d + 1) // 2
    u1 = 1.0 - rng.random(n)
    u2 = rng.random(n)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty(2 * n)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return NoiseVector(z[:d], seed=int(seed))


def grad_norm_clip(g, max_norm: float) -> np.ndarray:
    """Rescale ``g`` to norm ``max_norm`` if it is longer; otherwise return it as is."""
    g = np.asarray(g, dtype=np.float64)
    if not max_norm > 0:
        raise ValueError("max_norm must be > 0")
    if not np.all(np.isfinite(g)):
        raise ad.NonFiniteError("grad_norm_clip: gradient contains NaN or Inf")
    n = float(np.linalg.norm(g))
    if n <= max_norm:
        return g
    return g * (max_norm / n)


@dataclass(frozen=True)
class BestIterate:
    image: np.ndarray
    reward: float
    t: int
    eps: NoiseVector


@dataclass(frozen=True)
class TrajectoryRow:
    t: int
    reward: float
    per_term: tuple
    k: float
    grad_pre: float
    grad_post: float
    eps_norm: float
    is_new_best: bool
    objective: float
    velocity_norm: float


@dataclass
class OptimizerState:
    eps: NoiseVector
    velocity: np.ndarray
    t: int = 0
    best: Optional[BestIterate] = None

    @property
    def best_score(self) -> float:
        return -math.inf if self.best is None else self.best.reward


@dataclass
class RunRecord:
    term_names: list
    rows: list = field(default_factory=list)
    best: Optional[BestIterate] = None
    final_eps: Optional[NoiseVector] = None
    wall_time: float = 0.0
    config: Optional[OptimizerConfig] = None

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rows])

    def term_values(self, name: str) -> np.ndarray:
        i = self.term_names.index(name)
        return np.array([r.per_term[i] for r in self.rows])

    def summary(self, include_timing: bool = False) -> dict:
        out = {
            "config": asdict(self.config) if self.config is not None else None,
            "terms": list(self.term_names),
            "evaluations": len(self.rows),
            "best": {
                "reward": self.best.reward,
                "t": self.best.t,
                "per_term": dict(zip(self.term_names, self.rows[self.best.t].per_term)),
                "eps": self.best.eps.values.tolist(),
            },
            "initial": {
                "reward": self.rows[0].reward,
                "per_term": dict(zip(self.term_names, self.rows[0].per_term)),
            },
            "final_eps_norm": self.final_eps.norm,
        }
        if include_timing:
            out["wall_time_s"] = self.wall_time
        return out


def init_state(d: int, seed: int) -> OptimizerState:
    return OptimizerState(sample_standard_normal(d, seed), np.zeros(d))


def _gradient(criterion: CriterionSpec, g: GeneratorSpec, eps: np.ndarray, p) -> tuple:
    """(J, R, per_term, grad) with everything evaluated at ``eps`` on a fresh tape."""
    with ad.Tape() as tape:
        leaf = tape.watch(eps)
        j, r, per_term = full_objective(criterion, g, leaf, p)
    if j.node is None:
        grad = np.zeros_like(eps)
    else:
        grad = tape.backward(j)[leaf.node].data
    return j.item(), r.item(), per_term, grad


def reno_step(state: OptimizerState, config: OptimizerConfig, g: GeneratorSpec,
              p: PromptEmbedding, criterion: CriterionSpec) -> tuple:
    """One iteration. Returns ``(new_state, row)``; ``state`` itself is not modified.

    Selection compares the score at the pre-update noise with strict ``>``.
    """
    criterion = replace(criterion, lambda_reg=config.lambda_reg)
    eps = state.eps.values
    per_term = None
    try:
        j, r, per_term, grad = _gradient(criterion, g, eps, p)
        if config.nesterov:
            look = eps + config.momentum * state.velocity
            grad = _gradient(criterion, g, look, p)[3]
        k = chi_norm_logpdf(eps).item()
        grad_pre = float(np.linalg.norm(grad))
        if not (math.isfinite(j) and math.isfinite(grad_pre)):
            raise ad.NonFiniteError("objective or gradient is not finite")
        clipped = grad_norm_clip(grad, config.clip_norm)
    except (ad.NonFiniteError, ad.DomainError, FloatingPointError) as exc:
        named = dict(zip(criterion.names, per_term)) if per_term is not None else None
        raise NumericAbort(state.t, named, exc) from exc

    with np.errstate(over="ignore", invalid="ignore"):  # checked just below
        velocity = config.momentum * state.velocity + config.learning_rate * clipped
        new_eps = eps + velocity
    if not np.all(np.isfinite(new_eps)):
        raise NumericAbort(state.t, dict(zip(criterion.names, per_term)),
                           ad.NonFiniteError("noise update is not finite"))

    score = r if config.select_on == "reward" else j
    is_best = score > state.best_score
    best = state.best
    if is_best:
        image = generate(g, eps, p).numpy()
        best = BestIterate(image, score, state.t, state.eps)
    row = TrajectoryRow(
        t=state.t, reward=r, per_term=tuple(per_term), k=k,
        grad_pre=grad_pre, grad_post=float(np.linalg.norm(clipped)),
        eps_norm=state.eps.norm, is_new_best=is_best, objective=j,
        velocity_norm=float(np.linalg.norm(velocity)),
    )
    new_state = OptimizerState(NoiseVector(new_eps, seed=state.eps.seed), velocity, state.t + 1, best)
    return new_state, row


def reno_run(g: GeneratorSpec, p: PromptEmbedding, criterion: CriterionSpec,
             config: OptimizerConfig = OptimizerConfig(), eps0: Optional[NoiseVector] = None,
             on_step=None) -> tuple:
    """Optimize the initial noise and return ``(best_image, RunRecord)``.

    ``eps0`` defaults to ``sample_standard_normal(g.noise_dim, config.seed)``.
    ``on_step(state, row)`` is called after every iteration if given.
    """
    start = time.perf_counter()
    if eps0 is None:
        state = init_state(g.noise_dim, config.seed)
    else:
        if eps0.dim != g.noise_dim:
            raise ValueError(f"eps0 has dimension {eps0.dim}, generator expects {g.noise_dim}")
        state = OptimizerState(eps0, np.zeros(g.noise_dim))
    record = RunRecord(term_names=criterion.names, config=config)
    for _ in range(config.steps + 1):
        prev = state
        state, row = reno_step(state, config, g, p, criterion)
        record.rows.append(row)
        if on_step is not None:
            on_step(prev, row)
    record.best = state.best
    record.final_eps = state.eps
    record.wall_time = time.perf_counter() - start
    log.debug("run seed=%s best R=%.6g at t=%d", config.seed, state.best.reward, state.best.t)
    return state.best.image, record
