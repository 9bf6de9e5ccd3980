"""Run configuration: a flat ``key = value`` file format.

Syntax, one setting per line::

    # comment
    seed = 241103414
    n = 20, 40            # lists are comma separated
    p_miss: [0.3]         # ':' and surrounding brackets are also accepted
    methods = T1, T4
    imputers.d_pool = 5

Unknown keys are rejected.  :func:`dump_config` writes the canonical form,
which parses back to an identical :class:`RunConfig`.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .imputers import METHODS, ImputerParams
from .mcengine import BRANCHES, TABLE1_LEVELS, Scenario, Settings, expand_grid
from .rngkit import DEFAULT_SEED


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = DEFAULT_SEED
    n: tuple = (40,)
    p_miss: tuple = (0.30,)
    p_ext: tuple = (0.05,)
    rho: tuple = (0.6,)
    M: tuple = (5,)
    n_sim: tuple = (50,)
    methods: tuple = METHODS
    branches: tuple = BRANCHES
    K: int = 5
    alpha: float = 0.5
    threshold: float = 0.5
    imputers: ImputerParams = field(default_factory=ImputerParams)
    workers: int = 1
    out: Optional[str] = None
    emit_csv: bool = True
    emit_svg: bool = False
    keep_replicates: bool = False
    dump_data: bool = False
    dump_fits: bool = False
    allow_custom: bool = False

    @property
    def settings(self) -> Settings:
        return Settings(K=self.K, alpha=self.alpha, threshold=self.threshold, imputer=self.imputers)

    def scenarios(self) -> list[Scenario]:
        return expand_grid(self)


_LIST_TYPES = {
    "n": int,
    "p_miss": float,
    "p_ext": float,
    "rho": float,
    "M": int,
    "n_sim": int,
    "methods": str,
    "branches": str,
}
_SCALAR_TYPES = {
    "seed": int,
    "K": int,
    "alpha": float,
    "threshold": float,
    "workers": int,
    "out": str,
    "emit_csv": bool,
    "emit_svg": bool,
    "keep_replicates": bool,
    "dump_data": bool,
    "dump_fits": bool,
    "allow_custom": bool,
}
_IMPUTER_TYPES = {f.name: f.type for f in fields(ImputerParams)}
_IMPUTER_CASTS = {"int": int, "float": float}


def known_keys() -> list[str]:
    return list(_SCALAR_TYPES) + list(_LIST_TYPES) + [f"imputers.{k}" for k in _IMPUTER_TYPES]


def _cast(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _split_line(line: str, lineno: int) -> tuple[str, str]:
    cut = [i for i in (line.find("="), line.find(":")) if i >= 0]
    if not cut:
        raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
    i = min(cut)
    return line[:i].strip(), line[i + 1 :].strip()


def _unknown(key: str) -> ConfigError:
    hint = difflib.get_close_matches(key, known_keys(), n=1)
    suffix = f" (did you mean {hint[0]}?)" if hint else ""
    return ConfigError(f"unknown key {key}{suffix}")


def parse_config_text(text: str, *, allow_custom: Optional[bool] = None) -> RunConfig:
    values: dict = {}
    imputer: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, raw = _split_line(line, lineno)
        if key.startswith("imputers."):
            name = key.split(".", 1)[1]
            if name not in _IMPUTER_TYPES:
                raise _unknown(key)
            imputer[name] = _cast(key, raw, _IMPUTER_CASTS[_IMPUTER_TYPES[name]])
        elif key in _LIST_TYPES:
            items = [x for x in raw.strip().strip("[]").split(",") if x.strip()]
            values[key] = tuple(_cast(key, x, _LIST_TYPES[key]) for x in items)
        elif key in _SCALAR_TYPES:
            values[key] = _cast(key, raw, _SCALAR_TYPES[key])
        else:
            raise _unknown(key)
    cfg = RunConfig(**values, imputers=ImputerParams(**imputer))
    if allow_custom is not None:
        cfg = replace(cfg, allow_custom=allow_custom or cfg.allow_custom)
    validate(cfg)
    return cfg


def parse_config(path: str | Path, *, allow_custom: Optional[bool] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, allow_custom=allow_custom)


def validate(cfg: RunConfig) -> None:
    for key in ("methods", "branches"):
        legal = METHODS if key == "methods" else BRANCHES
        bad = [v for v in getattr(cfg, key) if v not in legal]
        if bad or not getattr(cfg, key):
            raise ConfigError(f"{key} must be a non-empty subset of {list(legal)}, got {bad}")
    if cfg.K < 2:
        raise ConfigError("K must be >= 2")
    if not 0 <= cfg.alpha <= 1 or not 0 < cfg.threshold <= 1:
        raise ConfigError("alpha must lie in [0, 1] and threshold in (0, 1]")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must fit in 64 unsigned bits")
    if not cfg.allow_custom:
        for name, legal in TABLE1_LEVELS.items():
            bad = [v for v in getattr(cfg, name) if v not in legal]
            if bad:
                raise ConfigError(
                    f"{name} levels {bad} are not in the design table {list(legal)}; "
                    "use --allow-custom for other values"
                )
    try:
        scenarios = expand_grid(cfg)
        for sc in scenarios:
            sc.validate(allow_custom=cfg.allow_custom)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key in _SCALAR_TYPES:
        v = getattr(cfg, key)
        if v is not None:
            lines.append(f"{key} = {_fmt(v)}")
    for key in _LIST_TYPES:
        lines.append(f"{key} = " + ", ".join(_fmt(v) for v in getattr(cfg, key)))
    for key in _IMPUTER_TYPES:
        lines.append(f"imputers.{key} = {_fmt(getattr(cfg.imputers, key))}")
    return "\n".join(lines) + "\n"
