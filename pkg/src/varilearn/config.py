"""Flat key=value experiment configuration shared by the CLI subcommands.

A config file holds one `key = value` pair per line with '#' comments; keys
are the long option names of the subcommand being run (dashes and
underscores interchangeable). Values from the file become parser defaults,
so anything given explicitly on the command line wins.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass, field

from .bilevel import LearnOptions, ProblemTemplate


class ConfigError(ValueError):
    pass


def read_config(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, value = text.partition("=")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(action: argparse.Action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        low = raw.lower()
        if low in _TRUE:
            return isinstance(action, argparse._StoreTrueAction)
        if low in _FALSE:
            return not isinstance(action, argparse._StoreTrueAction)
        raise ConfigError(f"boolean flag {action.dest!r} got {raw!r}")
    value = action.type(raw) if callable(action.type) else raw
    if action.choices is not None and value not in action.choices:
        raise ConfigError(f"{action.dest!r} must be one of {sorted(action.choices)}")
    return value


def apply_config(parser: argparse.ArgumentParser, config: dict[str, str]) -> None:
    """Install config values as defaults on the (sub)parser."""
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in config.items():
        if key == "config":
            continue
        action = actions.get(key)
        if action is None:
            raise ConfigError(f"unknown config key {key!r}")
        defaults[key] = _coerce(action, raw)
    parser.set_defaults(**defaults)


def parse_assignments(text: str) -> dict[str, float]:
    """'lam1=1000,alpha1=0.5' -> {'lam1': 1000.0, 'alpha1': 0.5}"""
    out: dict[str, float] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        key, eq, value = part.partition("=")
        if not eq:
            raise ConfigError(f"expected name=value, got {part!r}")
        try:
            out[key.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"bad numeric value in {part!r}") from None
    if not out:
        raise ConfigError("no assignments given")
    return out


@dataclass
class ExperimentConfig:
    """Everything a learning run needs, assembled by the CLI."""

    template: ProblemTemplate
    options: LearnOptions = field(default_factory=LearnOptions)
    init: dict[str, float] = field(default_factory=dict)
    theta: float = 0.5
    initial_size: int = 2
    seed: int = 0
    output_dir: str = "."
