"""Scenario description shared by the command line and config files."""
from __future__ import annotations

import dataclasses
import json
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigInvalid

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

COMMANDS = ("axioms", "transport", "poly", "diffusion", "extended", "counterexample", "approx")


@dataclass
class Scenario:
    command: str
    preset: Optional[str] = None
    weight: object = "one-plus-norm-sq"  # preset name or ascending coefficient list
    grid: Optional[dict] = None  # {"lo": float, "hi": float, "step": float}
    times: Optional[list] = None
    dt: float = 1e-3
    n_paths: int = 10_000
    seed: int = 0
    tol: float = 1e-8
    T: float = 1.0
    x0: list = field(default_factory=lambda: [0.0])
    omega: Optional[float] = None
    degree: int = 2
    degrees: list = field(default_factory=lambda: [3, 5, 7, 9])
    R: float = 10.0
    function: str = "sin"
    alpha: float = 2.0
    t_ladder: Optional[list] = None
    n_max: int = 100_000
    indicators: list = field(default_factory=list)
    expect_fail: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigInvalid(f"unknown command {self.command!r}; expected one of {', '.join(COMMANDS)}")
        for name in ("dt", "tol", "T", "R"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigInvalid(f"{name} must be a positive number, got {v!r}")
        for name in ("n_paths", "n_max", "degree"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigInvalid(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigInvalid(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")
        if self.grid is not None:
            if set(self.grid) != {"lo", "hi", "step"}:
                raise ConfigInvalid("grid needs exactly the keys lo, hi, step")
            if not self.grid["hi"] > self.grid["lo"] or not self.grid["step"] > 0:
                raise ConfigInvalid("grid needs lo < hi and step > 0")
        if self.times is not None and any(t < 0 for t in self.times):
            raise ConfigInvalid("times must be non-negative")
        if self.t_ladder is not None and any(t <= 0 for t in self.t_ladder):
            raise ConfigInvalid("t_ladder entries must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        if not isinstance(data, dict) or not data:
            raise ConfigInvalid("config is empty")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {', '.join(unknown)}")
        if "command" not in data:
            raise ConfigInvalid("config lacks a command")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from None


def load_config(path) -> dict:
    """Read a JSON or TOML file (by extension) into a dict."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {p}: {exc}") from None
    if not text.strip():
        raise ConfigInvalid("config is empty")
    try:
        if p.suffix == ".toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigInvalid(f"cannot parse {p}: {exc}") from None


_RANGE = re.compile(r"^\s*([^.]+(?:\.[^.]+)?)\.\.(.+)$")


def parse_ladder(text: str) -> list:
    """``1e-1..1e-6`` gives the decades in between; otherwise a comma list."""
    m = _RANGE.match(text)
    try:
        if m and "," not in text:
            a, b = float(m.group(1)), float(m.group(2))
            if a <= 0 or b <= 0:
                raise ValueError
            ka, kb = math.log10(a), math.log10(b)
            if abs(ka - round(ka)) > 1e-9 or abs(kb - round(kb)) > 1e-9:
                raise ValueError
            step = -1 if kb < ka else 1
            return [10.0 ** k for k in range(round(ka), round(kb) + step, step)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigInvalid(f"cannot parse time ladder {text!r}") from None
