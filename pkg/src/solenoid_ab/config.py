"""TOML run configuration with field-level diagnostics."""

from __future__ import annotations

import math
import re
from typing import List, Literal, Optional, Union

import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

SEED_MAX = 2 ** 64 - 1


class ConfigError(ValueError):
    """Bad configuration; ``diagnostics`` holds ``(line, field, message)`` triples."""

    def __init__(self, diagnostics, source="<config>"):
        self.diagnostics = list(diagnostics)
        self.source = source
        lines = []
        for line, fld, msg in self.diagnostics:
            where = f"{source}:{line}" if line else source
            lines.append(f"{where}: {fld}: {msg}" if fld else f"{where}: {msg}")
        super().__init__("\n".join(lines))


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TermSpec(_Model):
    mode: List[Union[int, str]]
    re: float = 0.0
    im: float = 0.0


class SeriesSpec(_Model):
    kind: Literal["terms", "factorial"] = "terms"
    dimension: int = Field(1, ge=1, le=4)
    levels: int = Field(6, ge=1, le=18)
    terms: List[TermSpec] = []

    @model_validator(mode="after")
    def _terms_match(self):
        if self.kind == "terms":
            if not self.terms:
                raise ValueError("kind = 'terms' needs at least one [[...series.terms]] entry")
            for t in self.terms:
                if len(t.mode) != self.dimension:
                    raise ValueError(f"mode {t.mode} has {len(t.mode)} entries, dimension is {self.dimension}")
        return self


class _ChainMixin(_Model):
    chain: Optional[List[int]] = None
    factorial_chain: Optional[int] = Field(None, ge=1, le=18)

    @model_validator(mode="after")
    def _one_chain(self):
        if self.chain is not None and self.factorial_chain is not None:
            raise ValueError("give either chain or factorial_chain, not both")
        return self


class DiophantineConfig(_ChainMixin):
    omega: List[float]
    normalize: bool = False
    gamma: float = Field(gt=0)
    exponent: Optional[int] = Field(None, ge=1)
    K: int = Field(20, ge=1, le=400)
    series: SeriesSpec
    rho: float = Field(0.1, gt=0)
    delta: float = Field(0.05, gt=0)
    threshold: float = Field(1e-3, gt=0, lt=1)
    residual_points: int = Field(64, ge=1)
    residual_tol: float = Field(1e-10, gt=0)

    @model_validator(mode="after")
    def _shape(self):
        if len(self.omega) != self.series.dimension:
            raise ValueError("omega length must equal series.dimension")
        if not self.delta < self.rho:
            raise ValueError("need delta < rho")
        return self


class SNormConfig(_ChainMixin):
    series: SeriesSpec
    rho: float = Field(0.1, gt=0)
    samples_per_period: int = Field(32, ge=1)


class BeltramiConfig(_Model):
    field: Literal["radial_stretch", "bump"] = "radial_stretch"
    c: float = Field(1 / 3, gt=-1, lt=1)
    radius: float = Field(1.0, gt=0)
    N: int = 512
    half_width: float = Field(2.0, gt=0)
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(200, ge=1)
    max_error: float = Field(2e-2, gt=0)
    k_slack: float = Field(0.05, ge=0)

    @field_validator("N")
    @classmethod
    def _pow2(cls, v):
        if v < 4 or v & (v - 1):
            raise ValueError("N must be a power of two >= 4")
        return v


class TowerConfig(_Model):
    family: Literal["geometric", "constant", "stationary", "zero", "counterexample"] = "geometric"
    chain: Optional[List[int]] = None
    base: float = Field(0.3, ge=0, lt=1)
    weights: Optional[List[float]] = None
    c: float = Field(0.05, ge=0)
    terms: int = Field(4, ge=1, le=6)
    J: int = Field(0, ge=0)
    heights: Optional[List[float]] = None
    points_per_2pi: int = Field(4, ge=1)
    samples_per_2pi: int = Field(32, ge=4)
    dy: float = Field(0.0625, gt=0)
    backend: Literal["leaf", "plane"] = "leaf"
    N: int = 256
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(200, ge=1)
    s_norm_threshold: float = Field(10.0, gt=0)
    decay_ratio: float = Field(0.8, gt=0, lt=1)


class CounterexampleConfig(_Model):
    N: int = Field(20, ge=1, le=30)
    nodes: int = Field(256, ge=3)
    h: float = Field(1e-5, ge=1e-6, le=1e-1)
    x_range: List[float] = [-10 * math.pi, 10 * math.pi]
    y_range: List[float] = [-5.0, 5.0]
    identity_tol: float = Field(1e-6, gt=0)
    samples: int = Field(100_000, ge=1)
    bound_margin: float = Field(1e-9, ge=0)
    tail_from: int = Field(1, ge=1)
    tail_to: int = Field(20, ge=2, le=30)
    moving_upto: int = Field(12, ge=1)
    fixed_tol: float = Field(1e-12, gt=0)
    moving_floor: float = Field(0.9 / (2 * math.e), gt=0)
    diophantine_levels: int = Field(8, ge=0, le=14)


class SplitConfig(_Model):
    field: Literal["global_stretch", "inner_stretch", "outer_stretch"] = "global_stretch"
    c: float = Field(1 / 3, gt=-1, lt=1)
    R: float = Field(1.0, gt=0)
    N: int = 256
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(200, ge=1)
    residual_points: int = Field(48, ge=1)
    residual_h: float = Field(1e-4, gt=0)
    residual_tol: float = Field(5e-2, gt=0)
    reference_tol: float = Field(2e-2, gt=0)


SECTIONS = {
    "solve-diophantine": ("diophantine", DiophantineConfig),
    "s-norm": ("snorm", SNormConfig),
    "solve-beltrami": ("beltrami", BeltramiConfig),
    "tower": ("tower", TowerConfig),
    "counterexample": ("counterexample", CounterexampleConfig),
    "split-solve": ("split", SplitConfig),
}

NEEDS_SEED = {"solve-diophantine", "counterexample", "split-solve"}


def _locate(text: str, loc) -> Optional[int]:
    """Best-effort line number of a dotted key path inside TOML text."""
    keys = [k for k in loc if isinstance(k, str)]
    if not keys:
        return None
    lines = text.splitlines()
    section_line = None
    best = None
    for depth in range(len(keys), 0, -1):
        table = ".".join(keys[:depth])
        pat = re.compile(r"^\s*\[\[?\s*" + re.escape(table) + r"\s*\]\]?\s*$")
        for i, ln in enumerate(lines, 1):
            if pat.match(ln):
                section_line = i
                break
        if section_line:
            rest = keys[depth:]
            if not rest:
                return section_line
            key_pat = re.compile(r"^\s*" + re.escape(rest[0]) + r"\s*=")
            for i in range(section_line, len(lines)):
                ln = lines[i]
                if i > section_line and ln.lstrip().startswith("["):
                    break
                if key_pat.match(ln):
                    best = i + 1
                    break
            return best or section_line
    key_pat = re.compile(r"^\s*" + re.escape(keys[-1]) + r"\s*=")
    for i, ln in enumerate(lines, 1):
        if key_pat.match(ln):
            return i
    return None


def parse_config(text: str, command: str, source: str = "<config>"):
    """Return ``(seed, section_model, raw_dict)`` for ``command``."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError([(int(m.group(1)) if m else None, None, str(exc))], source) from exc
    if command not in SECTIONS:
        raise ConfigError([(None, None, f"unknown command {command!r}")], source)
    name, model = SECTIONS[command]
    diags = []
    extra = sorted(set(raw) - {"seed", name})
    for key in extra:
        diags.append((_locate(text, (key,)), key, "unexpected top-level key or table"))
    seed = raw.get("seed")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed <= SEED_MAX):
        diags.append((_locate(text, ("seed",)), "seed", "must be an integer in [0, 2^64)"))
    section = raw.get(name, {})
    if not isinstance(section, dict):
        diags.append((_locate(text, (name,)), name, "must be a table"))
        section = {}
    cfg = None
    try:
        cfg = model.model_validate(section)
    except ValidationError as exc:
        for err in exc.errors():
            loc = (name,) + tuple(err["loc"])
            fld = ".".join(str(x) for x in loc)
            diags.append((_locate(text, loc), fld, err["msg"]))
    if diags:
        raise ConfigError(diags, source)
    return seed, cfg, raw
