"""Frozen one-step toy generators mapping (noise, prompt embedding) to an RGB image.

Four kinds are available:

``linear``
    ``sigmoid(W eps + B p + b)`` reshaped to (H, W, 3).
``mlp``
    two tanh hidden layers, prompt added to the first pre-activation through a
    fixed projection, sigmoid output layer.
``colorfield``
    a smooth analytic field: pixel ``(i, j, c)`` is a sigmoid of a sum of fixed
    sinusoids over the pixel coordinates, whose amplitudes are tanh features
    of the noise and prompt. Every pixel depends on every noise coordinate.
``latent+decoder``
    an MLP producing a low-resolution latent grid, followed by a fixed
    decoder (bilinear-style upsampling, channel mixing, sigmoid).

Weights are drawn once from ``weight_seed`` and stored read-only; nothing in
the package ever writes to them.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

KINDS = ("linear", "mlp", "colorfield", "latent+decoder")
DEFAULT_PROMPT_DIM = 16
LATENT_CHANNELS = 4
LATENT_FACTOR = 8

__all__ = [
    "KINDS",
    "PromptEmbedding",
    "NoiseVector",
    "GeneratorSpec",
    "make_generator",
    "generate",
    "latent",
    "decode",
    "embed_prompt",
    "save_generator",
    "load_generator",
    "serialize_generator",
    "deserialize_generator",
]


@dataclass(frozen=True)
class PromptEmbedding:
    vector: np.ndarray
    source_text: Optional[str] = None

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64)
        if v.ndim != 1 or v.size < 1 or not np.all(np.isfinite(v)):
            raise ValueError("prompt embedding must be a finite 1-d vector")
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.size


@dataclass(frozen=True)
class NoiseVector:
    values: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("noise must be a finite 1-d vector")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.size

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    kind: str
    noise_dim: int
    image_shape: tuple
    weights: dict = field(repr=False)
    prompt_dim: int = DEFAULT_PROMPT_DIM
    weight_seed: int = 0
    output_squash: str = "sigmoid"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unsupported generator kind {self.kind!r}; expected one of {KINDS}")
        if self.output_squash != "sigmoid":
            raise ValueError("only the sigmoid output squash is supported")
        frozen = {}
        for name, w in self.weights.items():
            a = np.array(w, dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"generator weight {name!r} contains NaN or Inf")
            a.flags.writeable = False
            frozen[name] = a
        object.__setattr__(self, "weights", frozen)
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))

    @property
    def n_pixels(self) -> int:
        h, w, _ = self.image_shape
        return h * w

    def fingerprint(self) -> str:
        return hashlib.sha256(serialize_generator(self)).hexdigest()


def _rng(seed: int, *salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *salt]))


def _colorfield_basis(rng: np.random.Generator, h: int, w: int, k: int) -> np.ndarray:
    """(h*w*3, k) matrix of fixed sinusoids over normalized pixel coordinates."""
    u, v = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    freq = rng.uniform(0.5, 3.0, size=(k, 2)) * math.pi
    phase = rng.uniform(0, 2 * math.pi, size=k)
    # a quarter of the components are flat so the field can shift colour globally
    freq[: k // 4] = 0.0
    phase[: k // 4] = 0.0
    mix = rng.normal(size=(3, k))
    waves = np.cos(u[..., None] * freq[:, 0] + v[..., None] * freq[:, 1] + phase)  # (h, w, k)
    basis = waves[:, :, None, :] * mix[None, None, :, :]  # (h, w, 3, k)
    return basis.reshape(h * w * 3, k) * (2.0 / math.sqrt(k))


def _upsample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation from n_in samples to n_out samples (1-d)."""
    pos = np.linspace(0, n_in - 1, n_out)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def make_generator(kind: str, noise_dim: int, image_shape, weight_seed: int = 0,
                   prompt_dim: int = DEFAULT_PROMPT_DIM, hidden: int = 64) -> GeneratorSpec:
    if kind not in KINDS:
        raise ValueError(f"unsupported generator kind {kind!r}; expected one of {KINDS}")
    if noise_dim < 2:
        raise ValueError("noise_dim must be at least 2")
    h, w, c = (int(s) for s in image_shape)
    if h < 1 or w < 1 or c != 3:
        raise ValueError(f"image_shape must be (H, W, 3) with H, W >= 1, got {image_shape}")
    n_out = h * w * 3
    rng = _rng(weight_seed, KINDS.index(kind))
    d, dp = noise_dim, prompt_dim
    wts: dict[str, np.ndarray] = {}

    if kind == "linear":
        wts["W"] = rng.normal(size=(n_out, d)) * (1.5 / math.sqrt(d))
        wts["B"] = rng.normal(size=(n_out, dp)) * 0.5
        wts["b"] = rng.normal(size=n_out) * 0.1
    elif kind == "mlp":
        wts["W1"] = rng.normal(size=(hidden, d)) * (1.0 / math.sqrt(d))
        wts["P1"] = rng.normal(size=(hidden, dp)) * 0.5
        wts["b1"] = rng.normal(size=hidden) * 0.1
        wts["W2"] = rng.normal(size=(hidden, hidden)) * (1.0 / math.sqrt(hidden))
        wts["b2"] = rng.normal(size=hidden) * 0.1
        wts["W3"] = rng.normal(size=(n_out, hidden)) * (2.0 / math.sqrt(hidden))
        wts["b3"] = rng.normal(size=n_out) * 0.1
    elif kind == "colorfield":
        k = hidden // 2
        wts["A"] = rng.normal(size=(k, d)) * (1.0 / math.sqrt(d))
        wts["C"] = rng.normal(size=(k, dp)) * 0.5
        wts["Phi"] = _colorfield_basis(rng, h, w, k) * 2.0
    else:
        lh, lw = max(1, math.ceil(h / LATENT_FACTOR)), max(1, math.ceil(w / LATENT_FACTOR))
        n_lat = lh * lw * LATENT_CHANNELS
        wts["W1"] = rng.normal(size=(hidden, d)) * (1.0 / math.sqrt(d))
        wts["P1"] = rng.normal(size=(hidden, dp)) * 0.5
        wts["b1"] = rng.normal(size=hidden) * 0.1
        wts["W2"] = rng.normal(size=(n_lat, hidden)) * (1.5 / math.sqrt(hidden))
        wts["b2"] = rng.normal(size=n_lat) * 0.1
        # decoder: separable upsample of every latent channel, then 4 -> 3 channel mix
        up = np.kron(_upsample_matrix(h, lh), _upsample_matrix(w, lw))  # (h*w, lh*lw)
        mix = rng.normal(size=(3, LATENT_CHANNELS)) * 1.2
        # latent layout (lh, lw, 4) row-major; output layout (h, w, 3) row-major
        wts["D"] = np.einsum("pq,cl->pcql", up, mix).reshape(h * w * 3, lh * lw * LATENT_CHANNELS)
        wts["d0"] = rng.normal(size=n_out) * 0.1
    return GeneratorSpec(kind, d, (h, w, 3), wts, prompt_dim=dp, weight_seed=int(weight_seed))


def _noise_tensor(g: GeneratorSpec, eps) -> Tensor:
    if isinstance(eps, NoiseVector):
        eps = eps.values
    eps = ad.as_tensor(eps)
    if eps.shape != (g.noise_dim,):
        raise ValueError(f"noise has shape {eps.shape}, generator expects ({g.noise_dim},)")
    return eps


def _prompt_vector(g: GeneratorSpec, p) -> np.ndarray:
    v = p.vector if isinstance(p, PromptEmbedding) else np.asarray(p, dtype=np.float64)
    if v.shape != (g.prompt_dim,):
        raise ValueError(f"prompt embedding has shape {v.shape}, generator expects ({g.prompt_dim},)")
    return v


def latent(g: GeneratorSpec, eps, p) -> Tensor:
    """Latent grid (flattened) of a ``latent+decoder`` generator."""
    if g.kind != "latent+decoder":
        raise ValueError("latent() is only defined for the latent+decoder kind")
    e = _noise_tensor(g, eps)
    w = g.weights
    h1 = ad.tanh(ad.matvec(w["W1"], e) + (w["P1"] @ _prompt_vector(g, p) + w["b1"]))
    return ad.tanh(ad.matvec(w["W2"], h1) + w["b2"])


def decode(g: GeneratorSpec, z) -> Tensor:
    """Fixed decoder of a ``latent+decoder`` generator."""
    if g.kind != "latent+decoder":
        raise ValueError("decode() is only defined for the latent+decoder kind")
    w = g.weights
    out = ad.sigmoid(ad.matvec(w["D"], z) + w["d0"])
    return ad.reshape(out, g.image_shape)


def generate(g: GeneratorSpec, eps, p) -> Tensor:
    """Image x0 = G(eps, p) as an (H, W, 3) tensor with values in [0, 1].

    ``eps`` may be a NoiseVector, an array or a taped Tensor; in the last case
    the image is differentiable w.r.t. it.
    """
    if g.kind == "latent+decoder":
        return decode(g, latent(g, eps, p))
    e = _noise_tensor(g, eps)
    pv = _prompt_vector(g, p)
    w = g.weights
    if g.kind == "linear":
        pre = ad.matvec(w["W"], e) + (w["B"] @ pv + w["b"])
    elif g.kind == "mlp":
        h1 = ad.tanh(ad.matvec(w["W1"], e) + (w["P1"] @ pv + w["b1"]))
        h2 = ad.tanh(ad.matvec(w["W2"], h1) + w["b2"])
        pre = ad.matvec(w["W3"], h2) + w["b3"]
    else:
        amp = ad.tanh(ad.matvec(w["A"], e) + w["C"] @ pv)
        pre = ad.matvec(w["Phi"], amp)
    return ad.reshape(ad.sigmoid(pre), g.image_shape)


def embed_prompt(text: str, d_p: int = DEFAULT_PROMPT_DIM) -> PromptEmbedding:
    """Deterministic unit-norm stand-in for a text encoder, seeded by SHA-256 of ``text``."""
    if d_p < 1:
        raise ValueError("d_p must be >= 1")
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    rng = np.random.default_rng(np.random.SeedSequence(int.from_bytes(digest, "little")))
    v = rng.normal(size=d_p)
    return PromptEmbedding(v / np.linalg.norm(v), source_text=text)


# -- serialization -----------------------------------------------------------
#
# layout (little-endian):
#   magic b"RNOG" | u16 version | u16 len + kind utf-8 | u32 noise_dim
#   | 3 x u32 image shape | u32 prompt_dim | i64 weight_seed | u32 n_arrays
#   then per array: u16 len + name utf-8 | u8 ndim | ndim x u32 dims | f64 payload

MAGIC = b"RNOG"
FORMAT_VERSION = 1


def _put_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def serialize_generator(g: GeneratorSpec) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    _put_str(buf, g.kind)
    buf.write(struct.pack("<I3IIqI", g.noise_dim, *g.image_shape, g.prompt_dim,
                          g.weight_seed, len(g.weights)))
    for name in sorted(g.weights):
        a = g.weights[name]
        _put_str(buf, name)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ValueError("truncated generator file")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def deserialize_generator(raw: bytes) -> GeneratorSpec:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise ValueError("not a generator file (bad magic)")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported generator file version {version}")
    kind = r.string()
    noise_dim, h, w, c, prompt_dim, seed, n = r.unpack("<I3IIqI")
    weights = {}
    for _ in range(n):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = math.prod(shape)
        weights[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
    if r.pos != len(raw):
        raise ValueError("trailing bytes in generator file")
    return GeneratorSpec(kind, noise_dim, (h, w, c), weights, prompt_dim=prompt_dim, weight_seed=seed)


def save_generator(g: GeneratorSpec, path: Union[str, Path]) -> None:
    Path(path).write_bytes(serialize_generator(g))


def load_generator(path: Union[str, Path]) -> GeneratorSpec:
    return deserialize_generator(Path(path).read_bytes())
