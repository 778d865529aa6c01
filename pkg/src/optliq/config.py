"""Plain-text configuration files for models and experiment settings.

Files use INI syntax.  Arrays are written as JSON lists, e.g.::

    [chain]
    generator = [[-4, 4], [4, -4]]
    pi0 = [0.5, 0.5]

Model sections are ``chain``, ``jumps``, ``impact``, ``terminal`` and
``scalars``; ``grid``, ``mc`` and ``experiment`` hold run settings.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import ConfigError, ModelSpecError
from .model import ChainSpec, ImpactSpec, JumpSpec, ModelSpec, TerminalSpec

MODEL_SECTIONS = ("chain", "jumps", "impact", "terminal", "scalars")
RECIPES = ("table2", "counterexample", "gain_T2", "gain_T4", "calib_set1", "calib_set2", "numax_sweep")


@dataclass
class RunConfig:
    """Parsed configuration: the model plus free-form run settings."""

    spec: ModelSpec
    grid: Dict[str, str] = field(default_factory=dict)
    mc: Dict[str, str] = field(default_factory=dict)
    experiment: Dict[str, str] = field(default_factory=dict)
    text: str = ""
    path: Optional[str] = None

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def get(self, section: str, key: str, default=None, cast=float):
        table = getattr(self, section)
        if key not in table:
            return default
        try:
            return cast(table[key])
        except ValueError:
            raise ConfigError(f"[{section}] {key}: cannot parse {table[key]!r}") from None


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    return cp


def _field(cp, section, key, kind="float", default=None):
    if not cp.has_option(section, key):
        if default is not None:
            return default
        raise ConfigError(f"[{section}] missing field {key!r}")
    raw = cp.get(section, key)
    try:
        if kind == "float":
            return float(raw)
        if kind == "json":
            return json.loads(raw)
        return raw.strip()
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} ({exc})") from None


def parse_config(text: str, path: Optional[str] = None) -> RunConfig:
    """Parse configuration text; raises :class:`ConfigError` with a section/field message."""
    cp = _parser()
    try:
        cp.read_string(text, source=path or "<string>")
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for sec in MODEL_SECTIONS:
        if not cp.has_section(sec):
            raise ConfigError(f"missing section [{sec}]")
    try:
        chain = ChainSpec(Q=_field(cp, "chain", "generator", "json"), pi0=_field(cp, "chain", "pi0", "json"))
        jumps = JumpSpec(
            support=_field(cp, "jumps", "support", "json"),
            base_intensity=_field(cp, "jumps", "base_intensity", "json"),
            impact_coefficient=_field(cp, "jumps", "impact_coefficient", "json"),
        )
        impact = ImpactSpec(c_f=_field(cp, "impact", "c_f", default=0.0),
                            sigma_exp=_field(cp, "impact", "sigma_exp", default=0.6))
        form = _field(cp, "terminal", "form", "str", default="zero")
        if form == "custom":
            raise ConfigError("[terminal] form: custom terminal values cannot be given in a file")
        terminal = TerminalSpec(form=form, vartheta=_field(cp, "terminal", "vartheta", default=0.0))
        spec = ModelSpec(
            chain=chain,
            jumps=jumps,
            impact=impact,
            terminal=terminal,
            rho=_field(cp, "scalars", "rho", default=0.0),
            T=_field(cp, "scalars", "T"),
            w0=_field(cp, "scalars", "w0"),
            s0=_field(cp, "scalars", "s0", default=1.0),
            nu_max=_field(cp, "scalars", "nu_max"),
        )
    except ModelSpecError as exc:
        raise ConfigError(f"invalid model: {exc}") from None
    extra = {s: dict(cp.items(s)) if cp.has_section(s) else {} for s in ("grid", "mc", "experiment")}
    return RunConfig(spec=spec, text=text, path=path, **extra)


def load_config(path) -> RunConfig:
    """Load a config file, or a bundled recipe when ``path`` is a recipe name."""
    p = Path(path)
    if not p.exists() and str(path) in RECIPES:
        return load_recipe(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(p))


def recipe_path(name: str) -> Path:
    return Path(str(resources.files("optliq") / "recipes" / f"{name}.cfg"))


def load_recipe(name: str) -> RunConfig:
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe {name!r}; choose from {', '.join(RECIPES)}")
    p = recipe_path(name)
    return parse_config(p.read_text(), str(p))


def _num(x) -> str:
    return repr(float(x))


def _arr(a) -> str:
    return json.dumps(np.asarray(a, dtype=float).tolist())


def spec_to_text(spec: ModelSpec, extra: Optional[Dict[str, Dict[str, object]]] = None) -> str:
    """Serialize a spec (and optional run sections) to config text.

    Callables (time multiplier, general impact, custom terminal) have no file
    representation and are written by name only as comments.
    """
    lines = [
        "[chain]",
        f"generator = {_arr(spec.chain.Q)}",
        f"pi0 = {_arr(spec.chain.pi0)}",
        "",
        "[jumps]",
        f"support = {_arr(spec.jumps.support)}",
        f"base_intensity = {_arr(spec.jumps.base_intensity)}",
        f"impact_coefficient = {_arr(spec.jumps.impact_coefficient)}",
    ]
    if spec.jumps.time_multiplier is not None:
        lines.append(f"# time_multiplier: {getattr(spec.jumps.time_multiplier, '__qualname__', 'callable')}")
    lines += [
        "",
        "[impact]",
        f"c_f = {_num(spec.impact.c_f)}",
        f"sigma_exp = {_num(spec.impact.sigma_exp)}",
    ]
    if spec.impact.general_f is not None:
        lines.append(f"# general_f: {getattr(spec.impact.general_f, '__qualname__', 'callable')}")
    lines += [
        "",
        "[terminal]",
        f"form = {spec.terminal.form}",
        f"vartheta = {_num(spec.terminal.vartheta)}",
        "",
        "[scalars]",
        f"T = {_num(spec.T)}",
        f"rho = {_num(spec.rho)}",
        f"w0 = {_num(spec.w0)}",
        f"s0 = {_num(spec.s0)}",
        f"nu_max = {_num(spec.nu_max)}",
    ]
    for name, table in (extra or {}).items():
        lines += ["", f"[{name}]"] + [f"{k} = {v}" for k, v in table.items()]
    return "\n".join(lines) + "\n"


def spec_hash(spec: ModelSpec, *parts) -> str:
    """Content hash of a spec and any extra hashable parts (used for caches)."""
    h = hashlib.sha256(spec_to_text(spec).encode())
    for p in parts:
        h.update(repr(p).encode())
    return h.hexdigest()
