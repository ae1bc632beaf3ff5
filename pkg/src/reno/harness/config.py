"""Experiment configuration: a sectioned key-value (INI) file with a fixed schema.

Example::

    [generator]
    kind = mlp
    noise_dim = 64
    height = 32
    width = 32

    [prompt]
    text = a red car

    [criterion]
    terms = proto_align, brightness_taste, edge_smooth, prompt_match
    lambda_reg = 0.01
    proto_align.weight = 2.0
    edge_smooth.range = 20, 30

    [optimizer]
    steps = 50
    seed = 0

    [output]
    directory = out

Only ``generator.kind`` is required. Unknown sections or keys are rejected.
Per-term keys are ``<term>.kind``, ``<term>.weight``, ``<term>.range``,
``<term>.seed`` and, for color terms, ``<term>.channel``. Term names
``proto_align``, ``brightness_taste``, ``edge_smooth`` and ``prompt_match``
default to the calibrated suite; ``color`` defaults to the color criterion on
channel R; any other name must set ``<term>.kind``.

Overrides use ``section.key=value`` (e.g. ``optimizer.seed=3`` or
``criterion.proto_align.weight=0``) and are applied before validation.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from ..criteria import (CHANNELS, DEFAULT_SUITE, REWARD_KINDS, CriterionSpec, color_term,
                        make_toy_reward)
from ..generators import DEFAULT_PROMPT_DIM, KINDS, GeneratorSpec, PromptEmbedding, embed_prompt, \
    make_generator
from ..optimizer import OptimizerConfig

__all__ = [
    "ConfigError",
    "GeneratorSection",
    "TermConfig",
    "CriterionSection",
    "OptimizerSection",
    "OutputSection",
    "ExperimentConfig",
    "SCHEMA",
    "load_config",
    "parse_config",
    "apply_override",
]

_DEFAULTS = {kind: (rng, w) for kind, rng, w in DEFAULT_SUITE}
_TERM_KEYS = ("kind", "weight", "range", "seed", "channel")
_FORMATS = ("ppm", "csv", "json")


class ConfigError(ValueError):
    """Schema violation; ``field`` is the dotted path of the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def _int(s: str) -> int:
    return int(s.strip())


def _float(s: str) -> float:
    return float(s.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(s: str) -> list:
    return [x.strip() for x in s.split(",") if x.strip()]


# section -> key -> (parser, default); default None with required=True marks required keys
SCHEMA = {
    "generator": {
        "kind": (str, None),
        "noise_dim": (_int, 64),
        "height": (_int, 32),
        "width": (_int, 32),
        "weight_seed": (_int, 0),
        "prompt_dim": (_int, DEFAULT_PROMPT_DIM),
        "hidden": (_int, 64),
    },
    "prompt": {
        "text": (str, ""),
    },
    "criterion": {
        "terms": (_list, [k for k, _, _ in DEFAULT_SUITE]),
        "lambda_reg": (_float, 0.01),
        "seed": (_int, 0),
    },
    "optimizer": {
        "steps": (_int, 50),
        "learning_rate": (_float, 5.0),
        "momentum": (_float, 0.9),
        "clip_norm": (_float, 0.1),
        "seed": (_int, 0),
        "n_seeds": (_int, 1),
        "nesterov": (_bool, False),
        "select_on": (str, "reward"),
    },
    "output": {
        "directory": (str, "out"),
        "emit_every": (_int, 0),
        "formats": (_list, list(_FORMATS)),
        "timing": (_bool, False),
    },
}
REQUIRED = {("generator", "kind")}


@dataclass(frozen=True)
class GeneratorSection:
    kind: str
    noise_dim: int = 64
    height: int = 32
    width: int = 32
    weight_seed: int = 0
    prompt_dim: int = DEFAULT_PROMPT_DIM
    hidden: int = 64

    @property
    def image_shape(self) -> tuple:
        return (self.height, self.width, 3)


@dataclass(frozen=True)
class TermConfig:
    name: str
    kind: str
    weight: float
    range: tuple
    seed: int
    channel: str = "R"


@dataclass(frozen=True)
class CriterionSection:
    terms: tuple
    lambda_reg: float = 0.01
    seed: int = 0

    @property
    def names(self) -> list:
        return [t.name for t in self.terms]


@dataclass(frozen=True)
class OptimizerSection:
    steps: int = 50
    learning_rate: float = 5.0
    momentum: float = 0.9
    clip_norm: float = 0.1
    seed: int = 0
    n_seeds: int = 1
    nesterov: bool = False
    select_on: str = "reward"

    @property
    def seeds(self) -> list:
        return [self.seed + i for i in range(self.n_seeds)]


@dataclass(frozen=True)
class OutputSection:
    directory: str = "out"
    emit_every: int = 0
    formats: tuple = _FORMATS
    timing: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorSection
    prompt: str = ""
    criterion: CriterionSection = field(default_factory=lambda: CriterionSection(()))
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    output: OutputSection = field(default_factory=OutputSection)

    def build_generator(self) -> GeneratorSpec:
        g = self.generator
        return make_generator(g.kind, g.noise_dim, g.image_shape, g.weight_seed,
                              prompt_dim=g.prompt_dim, hidden=g.hidden)

    def build_prompt(self) -> PromptEmbedding:
        return embed_prompt(self.prompt, self.generator.prompt_dim)

    def build_criterion(self) -> CriterionSpec:
        terms = []
        for t in self.criterion.terms:
            if t.kind == "color":
                terms.append(color_term(t.channel, self.generator.image_shape, t.weight, name=t.name))
            else:
                terms.append(make_toy_reward(t.kind, t.range, t.weight, t.seed, name=t.name))
        return CriterionSpec(tuple(terms), self.criterion.lambda_reg)

    def optimizer_config(self, seed: Optional[int] = None) -> OptimizerConfig:
        o = self.optimizer
        return OptimizerConfig(
            steps=o.steps, learning_rate=o.learning_rate, momentum=o.momentum,
            clip_norm=o.clip_norm, lambda_reg=self.criterion.lambda_reg,
            seed=o.seed if seed is None else seed, nesterov=o.nesterov, select_on=o.select_on,
        )

    def echo(self) -> dict:
        """Plain-dict form with a stable key order, for summaries."""
        return {
            "generator": vars(self.generator).copy(),
            "prompt": self.prompt,
            "criterion": {
                "lambda_reg": self.criterion.lambda_reg,
                "seed": self.criterion.seed,
                "terms": [
                    {"name": t.name, "kind": t.kind, "weight": t.weight, "range": list(t.range),
                     "seed": t.seed, **({"channel": t.channel} if t.kind == "color" else {})}
                    for t in self.criterion.terms
                ],
            },
            "optimizer": vars(self.optimizer).copy(),
            # the output directory is left out so artifacts do not depend on where they are written
            "output": {k: (list(v) if k == "formats" else v)
                       for k, v in vars(self.output).items() if k != "directory"},
        }


def _new_parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case
    return cp


def apply_override(cp: configparser.ConfigParser, override: str) -> None:
    if "=" not in override:
        raise ConfigError(override, "override must have the form section.key=value")
    path, value = override.split("=", 1)
    path = path.strip()
    if "." not in path:
        raise ConfigError(path, "override key must be section.key")
    section, key = path.split(".", 1)
    if not cp.has_section(section):
        cp.add_section(section)
    cp.set(section, key, value.strip())


def _parse(section: str, key: str, raw: str):
    parser, _ = SCHEMA[section][key]
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}", f"invalid value {raw!r} ({exc})") from None


def _term_config(name: str, keys: dict, default_seed: int) -> TermConfig:
    path = f"criterion.{name}"
    kind = keys.get("kind", "").strip()
    if not kind:
        if name in _DEFAULTS:
            kind = name
        elif name == "color":
            kind = "color"
        else:
            raise ConfigError(f"{path}.kind", "required for a term without a built-in name")
    if kind not in REWARD_KINDS and kind != "color":
        raise ConfigError(f"{path}.kind", f"unknown reward kind {kind!r}; expected one of "
                                          f"{REWARD_KINDS + ('color',)}")
    default_range, default_weight = _DEFAULTS.get(kind, ((0.0, 1.0), 1.0))
    try:
        weight = float(keys["weight"]) if "weight" in keys else default_weight
    except ValueError:
        raise ConfigError(f"{path}.weight", f"invalid value {keys['weight']!r}") from None
    if not weight >= 0:
        raise ConfigError(f"{path}.weight", "must be >= 0")
    rng = default_range
    if "range" in keys:
        try:
            lo, hi = (float(v) for v in _list(keys["range"]))
        except ValueError:
            raise ConfigError(f"{path}.range", f"expected 'lo, hi', got {keys['range']!r}") from None
        if not lo < hi:
            raise ConfigError(f"{path}.range", "lo must be below hi")
        rng = (lo, hi)
    try:
        seed = int(keys["seed"]) if "seed" in keys else default_seed
    except ValueError:
        raise ConfigError(f"{path}.seed", f"invalid value {keys['seed']!r}") from None
    channel = keys.get("channel", "R").strip().upper()
    if channel not in CHANNELS:
        raise ConfigError(f"{path}.channel", f"expected one of R, G, B, got {channel!r}")
    if kind != "color" and "channel" in keys:
        raise ConfigError(f"{path}.channel", "only color terms take a channel")
    return TermConfig(name, kind, weight, rng, seed, channel)


def parse_config(text: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Parse and validate config text; raises ConfigError naming the offending field."""
    cp = _new_parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", f"malformed config: {exc}") from None
    for ov in overrides:
        apply_override(cp, ov)

    values: dict = {s: {} for s in SCHEMA}
    term_keys: dict = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        for key, raw in cp.items(section):
            if section == "criterion" and "." in key:
                name, sub = key.rsplit(".", 1)
                if sub not in _TERM_KEYS:
                    raise ConfigError(f"criterion.{key}", "unknown term key")
                term_keys.setdefault(name, {})[sub] = raw
                continue
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            values[section][key] = _parse(section, key, raw)

    for section, key in REQUIRED:
        if key not in values[section] or values[section][key] in ("", None):
            raise ConfigError(f"{section}.{key}", "required field is missing")
    for section, keys in SCHEMA.items():
        for key, (_, default) in keys.items():
            values[section].setdefault(key, default)

    gen = values["generator"]
    if gen["kind"] not in KINDS:
        raise ConfigError("generator.kind", f"unsupported kind {gen['kind']!r}; expected one of {KINDS}")
    for key in ("noise_dim",):
        if gen[key] < 2:
            raise ConfigError(f"generator.{key}", "must be >= 2")
    for key in ("height", "width", "prompt_dim", "hidden"):
        if gen[key] < 1:
            raise ConfigError(f"generator.{key}", "must be >= 1")

    crit = values["criterion"]
    names = crit["terms"]
    if not names:
        raise ConfigError("criterion.terms", "at least one term is required")
    if len(set(names)) != len(names):
        raise ConfigError("criterion.terms", "duplicate term names")
    stray = set(term_keys) - set(names)
    if stray:
        raise ConfigError(f"criterion.{sorted(stray)[0]}", "settings for a term not listed in criterion.terms")
    if crit["lambda_reg"] < 0:
        raise ConfigError("criterion.lambda_reg", "must be >= 0")
    terms = tuple(_term_config(n, term_keys.get(n, {}), crit["seed"]) for n in names)

    opt = values["optimizer"]
    checks = [
        ("steps", opt["steps"] >= 0, "must be >= 0"),
        ("learning_rate", opt["learning_rate"] > 0, "must be > 0"),
        ("momentum", 0 <= opt["momentum"] < 1, "must lie in [0, 1)"),
        ("clip_norm", opt["clip_norm"] > 0, "must be > 0"),
        ("n_seeds", opt["n_seeds"] >= 1, "must be >= 1"),
        ("select_on", opt["select_on"] in ("reward", "objective"), "must be 'reward' or 'objective'"),
    ]
    for key, ok, msg in checks:
        if not ok:
            raise ConfigError(f"optimizer.{key}", msg)

    out = values["output"]
    if out["emit_every"] < 0:
        raise ConfigError("output.emit_every", "must be >= 0")
    bad = [f for f in out["formats"] if f not in _FORMATS]
    if bad:
        raise ConfigError("output.formats", f"unknown format(s) {bad}; expected a subset of {_FORMATS}")

    return ExperimentConfig(
        generator=GeneratorSection(**gen),
        prompt=values["prompt"]["text"],
        criterion=CriterionSection(terms, crit["lambda_reg"], crit["seed"]),
        optimizer=OptimizerSection(**opt),
        output=OutputSection(out["directory"], out["emit_every"], tuple(out["formats"]), out["timing"]),
    )


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)
