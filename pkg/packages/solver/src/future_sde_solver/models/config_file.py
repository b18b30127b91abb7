"""Key-value run configuration files.

Format::

    # comment
    seed = 20240611
    problem = "nonlinear"

    [picard]
    tol = 1e-3          # same as picard.tol = 1e-3 at top level

    [params]
    strength = 0.5

Every key has a declared type. Unknown keys, duplicates and values that do
not parse are errors carrying the offending line number.
"""

from __future__ import annotations

import re
from collections.abc import Callable
from pathlib import Path
from typing import Any

from future_sde_solver.models.config import RunConfig, SolverConfig
from future_sde_solver.models.errors import ConfigError

_SECTION = re.compile(r"^\[\s*([A-Za-z_][\w.-]*)\s*\]$")
_KEY = re.compile(r"^[A-Za-z_][\w.-]*$")


# ---------------------------------------------------------------------------
# Value parsers
# ---------------------------------------------------------------------------

def _parse_int(text: str) -> int:
    return int(text.replace("_", ""), 0)


def _parse_float(text: str) -> float:
    value = float(text)
    if value != value:
        raise ValueError("nan is not a valid setting")
    return value


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _optional(parser: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str) -> Any:
        return None if text.lower() in ("", "none") else parser(text)

    return parse


# (owner, field name, parser); owner "run" -> RunConfig, "solver" -> SolverConfig.
KEYS: dict[str, tuple[str, str, Callable[[str], Any]]] = {
    "seed": ("run", "seed", _parse_int),
    "problem": ("run", "problem", str),
    "dim": ("run", "dim", _parse_int),
    "tabulated": ("run", "tabulated", _optional(Path)),
    "output_dir": ("run", "output_dir", Path),
    "gate": ("run", "gate", _parse_float),
    "timings": ("run", "timings", _parse_bool),
    "dat": ("run", "dat", _parse_bool),
    "particles": ("solver", "particles", _parse_int),
    "gradient_mode": ("solver", "gradient_mode", str),
    "truncation_level": ("solver", "truncation_level", _optional(_parse_float)),
    "alpha_threshold": ("solver", "alpha_threshold", _parse_float),
    "workers": ("solver", "workers", _parse_int),
    "lattice.nodes": ("solver", "nodes", _parse_int),
    "lattice.n_steps": ("solver", "n_steps", _parse_int),
    "picard.lambda": ("solver", "picard_lambda", _optional(_parse_float)),
    "picard.tol": ("solver", "tol", _parse_float),
    "picard.max_iter": ("solver", "max_iter", _parse_int),
    "picard.outer_max_iter": ("solver", "outer_max_iter", _parse_int),
    "probe.budget": ("solver", "probe_budget", _parse_int),
    "probe.box": ("solver", "probe_box", _parse_float),
    "probe.kato_p": ("solver", "kato_p", _parse_float),
    "probe.kato_q": ("solver", "kato_q", _parse_float),
    "probe.override": ("solver", "override_assumptions", _parse_bool),
    "sde.jacobian_step": ("solver", "jacobian_step", _parse_float),
    "sde.chunk_bytes": ("solver", "chunk_bytes", _parse_int),
    "fd.scheme": ("run", "scheme", str),
    "fd.refine": ("run", "fd_refine", _parse_int),
    "fd.cfl": ("run", "cfl", _parse_float),
}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _split_value(raw: str, line_no: int) -> str:
    """Strip an inline comment and surrounding quotes."""
    raw = raw.strip()
    if raw.startswith('"'):
        end = raw.find('"', 1)
        if end < 0:
            raise ConfigError("unterminated string", line=line_no)
        rest = raw[end + 1:].strip()
        if rest and not rest.startswith("#"):
            raise ConfigError(f"unexpected text after string: {rest!r}", line=line_no)
        return raw[1:end]
    return raw.split("#", 1)[0].strip()


def parse_config_text(text: str, *, base_dir: Path | None = None) -> RunConfig:
    """Parse config text into a RunConfig with every default materialised."""
    seen: dict[str, int] = {}
    run_kwargs: dict[str, Any] = {}
    solver_kwargs: dict[str, Any] = {}
    params: dict[str, float] = {}
    section = ""

    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("["):
            match = _SECTION.match(stripped.split("#", 1)[0].strip())
            if match is None:
                raise ConfigError(f"malformed section header {stripped!r}", line=line_no)
            section = match.group(1)
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected key = value, got {stripped!r}", line=line_no)
        raw_key, raw_value = stripped.split("=", 1)
        raw_key = raw_key.strip()
        if not _KEY.match(raw_key):
            raise ConfigError(f"malformed key {raw_key!r}", line=line_no)
        key = f"{section}.{raw_key}" if section else raw_key
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (lines {seen[key]} and {line_no})", line=line_no)
        seen[key] = line_no
        value = _split_value(raw_value, line_no)

        if key.startswith("params."):
            name = key.removeprefix("params.")
            try:
                params[name] = _parse_float(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}", line=line_no) from exc
            continue
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", line=line_no)
        owner, field_name, parser = KEYS[key]
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", line=line_no) from exc
        (run_kwargs if owner == "run" else solver_kwargs)[field_name] = parsed

    if "seed" not in run_kwargs:
        raise ConfigError("seed required")
    tabulated = run_kwargs.get("tabulated")
    if tabulated is not None and base_dir is not None and not tabulated.is_absolute():
        run_kwargs["tabulated"] = base_dir / tabulated
    return RunConfig(params=params, solver=SolverConfig(**solver_kwargs), **run_kwargs)


def load_config(path: Path) -> RunConfig:
    """Read and parse ``path``; the returned config remembers its source."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config {path} is not UTF-8: {exc}") from exc
    config = parse_config_text(text, base_dir=path.parent)
    config.source = path
    return config
