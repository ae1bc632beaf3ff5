"""Differentiable criteria: color-channel score, toy reward terms, their weighted
combination, and the chi-norm noise regularizer.

All scorers take an (H, W, 3) image tensor and a prompt embedding and return a
0-d tensor. Toy rewards share a seed-derived "taste": the prompt embedding is
projected to a target on a coarse pooled grid, from which a smooth prototype
image is built. Terms built from the same seed therefore agree partially on
what a good image is, which is what makes leave-one-out studies informative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .generators import GeneratorSpec, NoiseVector, PromptEmbedding, generate

__all__ = [
    "CHANNELS",
    "REWARD_KINDS",
    "DEFAULT_SUITE",
    "RewardTerm",
    "CriterionSpec",
    "color_criterion",
    "color_term",
    "chi_norm_logpdf",
    "make_toy_reward",
    "prototype_image",
    "default_terms",
    "default_criterion",
    "effective_weight",
    "combined_reward",
    "full_objective",
]

CHANNELS = {"R": 0, "G": 1, "B": 2}
REWARD_KINDS = ("proto_align", "brightness_taste", "edge_smooth", "prompt_match")

# (kind, score range, weight) for the four default terms, in the order
# ImageReward-like, HPSv2-like, PickScore-like, CLIPScore-like.
DEFAULT_SUITE = (
    ("proto_align", (-2.0, 2.0), 1.0),
    ("brightness_taste", (0.2, 0.4), 5.0),
    ("edge_smooth", (20.0, 30.0), 0.05),
    ("prompt_match", (0.0, 1.0), 1.0),
)

POOL_GRID = 4
_LUMA = np.array([0.299, 0.587, 0.114])
# sharpness of the squash for each kind's raw statistic
_SHARPNESS = {
    "proto_align": 12.0,
    "brightness_taste": 40.0,
    "edge_smooth": 40.0,
    "prompt_match": 1.5,
}

Scorer = Callable[[Tensor, PromptEmbedding], Tensor]


@dataclass(frozen=True)
class RewardTerm:
    name: str
    weight: float
    score_range: tuple
    scorer: Scorer = field(repr=False, compare=False)
    kind: str = "custom"
    seed: Optional[int] = None

    def __post_init__(self):
        lo, hi = (float(v) for v in self.score_range)
        if not lo < hi:
            raise ValueError(f"score range must satisfy lo < hi, got ({lo}, {hi})")
        if not self.weight >= 0 or not math.isfinite(self.weight):
            raise ValueError(f"reward weight must be finite and >= 0, got {self.weight}")
        object.__setattr__(self, "score_range", (lo, hi))
        object.__setattr__(self, "weight", float(self.weight))

    def __call__(self, image: Tensor, prompt: PromptEmbedding) -> Tensor:
        return self.scorer(image, prompt)

    def with_weight(self, weight: float) -> "RewardTerm":
        return replace(self, weight=weight)


@dataclass(frozen=True)
class CriterionSpec:
    terms: tuple
    lambda_reg: float = 0.01

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ValueError("a criterion needs at least one reward term")
        names = [t.name for t in terms]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate reward term names: {names}")
        if not self.lambda_reg >= 0:
            raise ValueError("lambda_reg must be >= 0")
        object.__setattr__(self, "terms", terms)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terms]

    @property
    def weights(self) -> list[float]:
        return [t.weight for t in self.terms]

    def term(self, name: str) -> RewardTerm:
        for t in self.terms:
            if t.name == name:
                return t
        raise KeyError(f"unknown reward term {name!r}; have {self.names}")

    def with_weights(self, weights: dict) -> "CriterionSpec":
        unknown = set(weights) - set(self.names)
        if unknown:
            raise KeyError(f"unknown reward term(s) {sorted(unknown)}; have {self.names}")
        return replace(self, terms=tuple(
            t.with_weight(weights[t.name]) if t.name in weights else t for t in self.terms))

    def only(self, names: Sequence[str]) -> "CriterionSpec":
        """Zero the weight of every term not in ``names``."""
        keep = set(names)
        unknown = keep - set(self.names)
        if unknown:
            raise KeyError(f"unknown reward term(s) {sorted(unknown)}; have {self.names}")
        return self.with_weights({n: 0.0 for n in self.names if n not in keep})


# -- color criterion ---------------------------------------------------------


def _channel_index(c) -> int:
    if isinstance(c, str):
        try:
            return CHANNELS[c.upper()]
        except KeyError:
            raise ValueError(f"target channel must be one of R, G, B; got {c!r}") from None
    if c not in (0, 1, 2):
        raise ValueError(f"target channel index must be 0, 1 or 2; got {c!r}")
    return int(c)


def color_criterion(x0, target_channel) -> Tensor:
    """Sum over pixels of the target channel minus both other channels."""
    x0 = ad.as_tensor(x0)
    if x0.ndim != 3 or x0.shape[2] != 3:
        raise ValueError(f"color criterion needs an (H, W, 3) image, got shape {x0.shape}")
    c = _channel_index(target_channel)
    o1, o2 = (k for k in range(3) if k != c)
    diff = ad.channel(x0, c) - ad.channel(x0, o1) - ad.channel(x0, o2)
    return ad.total(diff)


def color_term(target_channel, image_shape, weight: float = 1.0, name: str = "color") -> RewardTerm:
    """Color criterion wrapped as a reward term; its range follows from pixels in [0, 1]."""
    c = _channel_index(target_channel)
    n = image_shape[0] * image_shape[1]
    return RewardTerm(name, weight, (-2.0 * n, float(n)),
                      lambda image, prompt: color_criterion(image, c), kind="color")


# -- chi-norm regularizer ----------------------------------------------------


def chi_norm_logpdf(eps) -> Tensor:
    """Log-density of ||eps|| under a chi distribution, up to a constant:
    (d - 1) log ||eps|| - ||eps||^2 / 2. Maximal at ||eps|| = sqrt(d - 1)."""
    if isinstance(eps, NoiseVector):
        eps = eps.values
    eps = ad.as_tensor(eps)
    d = eps.size
    r = ad.norm(eps)
    if r.item() == 0.0:
        raise ad.DomainError("chi_norm_logpdf: noise vector has zero norm")
    return ad.scale(ad.log(r), d - 1) - ad.scale(ad.sq_norm(eps), 0.5)


# -- toy reward surrogates ---------------------------------------------------


@lru_cache(maxsize=32)
def _pool_matrix(h: int, w: int) -> np.ndarray:
    """Block-average (h*w*3) pixels onto a (gh, gw, 3) grid, flattened row-major."""
    gh, gw = min(POOL_GRID, h), min(POOL_GRID, w)
    ri = np.arange(h) * gh // h
    ci = np.arange(w) * gw // w
    m = np.zeros((gh * gw * 3, h * w * 3))
    for i in range(h):
        for j in range(w):
            cell = ri[i] * gw + ci[j]
            for c in range(3):
                m[cell * 3 + c, (i * w + j) * 3 + c] = 1.0
    m /= m.sum(axis=1, keepdims=True)
    m.flags.writeable = False
    return m


@lru_cache(maxsize=32)
def _upsample_pooled(h: int, w: int) -> np.ndarray:
    """Smooth map from the pooled grid back to full resolution (bilinear)."""
    gh, gw = min(POOL_GRID, h), min(POOL_GRID, w)

    def interp(n_out, n_in):
        # pooled cell centres sit at (k + 0.5) * n_out / n_in - 0.5
        centres = (np.arange(n_in) + 0.5) * n_out / n_in - 0.5
        m = np.zeros((n_out, n_in))
        for i in range(n_out):
            if n_in == 1 or i <= centres[0]:
                m[i, 0] = 1.0
            elif i >= centres[-1]:
                m[i, -1] = 1.0
            else:
                k = int(np.searchsorted(centres, i) - 1)
                f = (i - centres[k]) / (centres[k + 1] - centres[k])
                m[i, k], m[i, k + 1] = 1 - f, f
        return m

    spatial = np.kron(interp(h, gh), interp(w, gw))  # (h*w, gh*gw)
    m = np.kron(spatial, np.eye(3))
    m.flags.writeable = False
    return m


@lru_cache(maxsize=32)
def _pooled_diff_matrix(gh: int, gw: int) -> np.ndarray:
    """Horizontal and vertical neighbour differences on the pooled grid."""
    rows = []
    for i in range(gh):
        for j in range(gw):
            for c in range(3):
                here = (i * gw + j) * 3 + c
                if j + 1 < gw:
                    r = np.zeros(gh * gw * 3)
                    r[here], r[here + 3] = -1.0, 1.0
                    rows.append(r)
                if i + 1 < gh:
                    r = np.zeros(gh * gw * 3)
                    r[here], r[here + gw * 3] = -1.0, 1.0
                    rows.append(r)
    m = np.array(rows) if rows else np.zeros((1, gh * gw * 3))
    m.flags.writeable = False
    return m


def _luma_matrix(cells: int) -> np.ndarray:
    return np.kron(np.eye(cells), _LUMA[None, :])


class _Taste:
    """Seed-derived projection of a prompt embedding to a pooled-grid target."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._proj: dict[int, np.ndarray] = {}

    def projection(self, d_p: int) -> np.ndarray:
        if d_p not in self._proj:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed & (2**64 - 1), 7919, d_p]))
            self._proj[d_p] = rng.normal(size=(POOL_GRID * POOL_GRID * 3, d_p)) * (1.5 / math.sqrt(d_p))
        return self._proj[d_p]

    def target(self, prompt: PromptEmbedding, cells: int) -> np.ndarray:
        """Values in (-1, 1), one per pooled channel entry."""
        t = np.tanh(self.projection(prompt.dim) @ prompt.vector * 2.0)
        return t[: cells * 3]

    def image_target(self, prompt: PromptEmbedding, h: int, w: int) -> np.ndarray:
        """The pooled target upsampled smoothly to full resolution (flattened)."""
        cells = _pool_matrix(h, w).shape[0] // 3
        return _upsample_pooled(h, w) @ self.target(prompt, cells)

    def pooled_target(self, prompt: PromptEmbedding, h: int, w: int) -> np.ndarray:
        # pooled from the full-resolution target so every term peaks at the same image
        return _pool_matrix(h, w) @ self.image_target(prompt, h, w)

    def prototype(self, prompt: PromptEmbedding, h: int, w: int) -> np.ndarray:
        return 0.5 + 0.35 * self.image_target(prompt, h, w)

    def pooled_prototype(self, prompt: PromptEmbedding, h: int, w: int) -> np.ndarray:
        return 0.5 + 0.35 * self.pooled_target(prompt, h, w)


def _peak_squash(raw: Tensor, lo: float, hi: float, sharpness: float) -> Tensor:
    """Map a non-positive statistic into (lo, hi]; raw == 0 gives exactly hi."""
    s = ad.sigmoid(ad.scale(raw, sharpness))
    return ad.sub(hi, ad.scale(ad.sub(1.0, ad.scale(s, 2.0)), hi - lo))


def _image_dims(image: Tensor) -> tuple:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"reward terms need an (H, W, 3) image, got shape {image.shape}")
    return image.shape[0], image.shape[1]


def make_toy_reward(kind: str, score_range=(0.0, 1.0), weight: float = 1.0, seed: int = 0,
                    name: Optional[str] = None) -> RewardTerm:
    """Build a frozen toy reward term squashed into ``score_range``.

    ``proto_align``       negative mean squared distance to the prompt's prototype image.
    ``brightness_taste``  luminance preference per pooled region.
    ``edge_smooth``       penalty on neighbouring-region differences that disagree
                          with the prototype's.
    ``prompt_match``      cosine between centred pooled features and the prompt target.

    The last three read the same pooled features. Each raw statistic is <= 0
    with equality at the prototype, and is squashed by ``hi - (hi - lo)(1 - 2 sigmoid(k raw))``.
    """
    if kind not in REWARD_KINDS:
        raise ValueError(f"unknown reward kind {kind!r}; expected one of {REWARD_KINDS}")
    lo, hi = (float(v) for v in score_range)
    if not lo < hi:
        raise ValueError(f"score range must satisfy lo < hi, got ({lo}, {hi})")
    taste = _Taste(seed)
    k = _SHARPNESS[kind]

    def pooled(image: Tensor):
        h, w = _image_dims(image)
        pool = _pool_matrix(h, w)
        cells = pool.shape[0] // 3
        return h, w, cells, ad.matvec(pool, ad.reshape(image, (h * w * 3,)))

    if kind == "proto_align":
        def raw(image, prompt):
            h, w = _image_dims(image)
            proto = taste.prototype(prompt, h, w)
            return ad.scale(ad.sq_norm(ad.sub(image, proto.reshape(h, w, 3))), -1.0 / (h * w * 3))
    elif kind == "brightness_taste":
        def raw(image, prompt):
            h, w, cells, f = pooled(image)
            luma = _luma_matrix(cells)
            want = luma @ taste.pooled_prototype(prompt, h, w)
            return ad.scale(ad.sq_norm(ad.sub(ad.matvec(luma, f), want)), -1.0 / cells)
    elif kind == "edge_smooth":
        def raw(image, prompt):
            h, w, cells, f = pooled(image)
            diff = _pooled_diff_matrix(min(POOL_GRID, h), min(POOL_GRID, w))
            want = diff @ taste.pooled_prototype(prompt, h, w)
            return ad.scale(ad.sq_norm(ad.sub(ad.matvec(diff, f), want)), -1.0 / diff.shape[0])
    else:
        def raw(image, prompt):
            h, w, _, f = pooled(image)
            t = taste.pooled_target(prompt, h, w)
            centred = ad.sub(f, 0.5)
            cos = ad.div(ad.total(ad.mul(centred, t)),
                         ad.scale(ad.add(ad.norm(centred), 1e-12), float(np.linalg.norm(t))))
            return ad.sub(cos, 1.0)

    def scorer(image: Tensor, prompt: PromptEmbedding) -> Tensor:
        return _peak_squash(raw(ad.as_tensor(image), prompt), lo, hi, k)

    return RewardTerm(name or kind, weight, (lo, hi), scorer, kind=kind, seed=int(seed))


def prototype_image(seed: int, prompt: PromptEmbedding, image_shape) -> np.ndarray:
    """The image every toy reward built from ``seed`` rates highest for ``prompt``."""
    h, w = int(image_shape[0]), int(image_shape[1])
    return _Taste(seed).prototype(prompt, h, w).reshape(h, w, 3)


def default_terms(seed: int = 0) -> tuple:
    return tuple(make_toy_reward(kind, rng_, w, seed) for kind, rng_, w in DEFAULT_SUITE)


def default_criterion(seed: int = 0, lambda_reg: float = 0.01) -> CriterionSpec:
    return CriterionSpec(default_terms(seed), lambda_reg)


def effective_weight(term: RewardTerm) -> float:
    """Weight of a term once its score range is rescaled to [0, 1]."""
    lo, hi = term.score_range
    return term.weight * (hi - lo)


# -- combination -------------------------------------------------------------


def combined_reward(spec: CriterionSpec, x0, p: PromptEmbedding) -> tuple:
    """Weighted sum of all terms, plus every term's unweighted value.

    Zero-weight terms are scored on a detached copy of the image so they are
    logged without adding nodes to the tape.
    """
    x0 = ad.as_tensor(x0)
    detached = None
    values = []
    for term in spec.terms:
        if term.weight == 0.0:
            if detached is None:
                detached = Tensor(x0.data)
            values.append(term(detached, p))
        else:
            values.append(term(x0, p))
    total = ad.weighted_sum(values, spec.weights)
    return total, [v.item() for v in values]


def full_objective(spec: CriterionSpec, g: GeneratorSpec, eps, p: PromptEmbedding) -> tuple:
    """(J, R_total, per_term) with J = lambda_reg * K(eps) + R_total.

    R_total is the selection score and never includes the regularizer.
    """
    x0 = generate(g, eps, p)
    r_total, per_term = combined_reward(spec, x0, p)
    k = chi_norm_logpdf(eps.values if isinstance(eps, NoiseVector) else eps)
    return ad.add(ad.scale(k, spec.lambda_reg), r_total), r_total, per_term
