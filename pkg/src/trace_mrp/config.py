"""Run configuration and its ``key = value`` text-file format.

Example file::

    # paths are resolved relative to the config file
    tweets = tweets.csv
    users = users.csv
    census = census.csv
    survey = survey.csv
    reference_date = 2022-06-01
    window_months = 24
    threshold = 0.5
    genders = female, male
    age_groups = <=18, 19-29, 30-39, >=40
    regions = TR1, TR2, TR3, TR4, TR5, TR6, TR7, TR8, TR9, TRA, TRB, TRC
    survey_metrics = fasting, praying
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .labels import DEFAULT_AGE_GROUPS, DEFAULT_GENDERS, DEFAULT_REGIONS, Labels

PATH_KEYS = ("tweets", "users", "census", "survey", "output_dir")
LIST_KEYS = ("genders", "age_groups", "regions", "survey_metrics")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    tweets: Path | None = None
    users: Path | None = None
    census: Path | None = None
    survey: Path | None = None
    output_dir: Path | None = None
    reference_date: dt.date | None = None
    window_months: int = 24
    threshold: float = 0.5
    genders: tuple[str, ...] = DEFAULT_GENDERS
    age_groups: tuple[str, ...] = DEFAULT_AGE_GROUPS
    regions: tuple[str, ...] = DEFAULT_REGIONS
    survey_metrics: tuple[str, ...] = ()
    outcome: str = "dummy"
    inner_max_iter: int = 200
    outer_max_iter: int = 100
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def labels(self) -> Labels:
        return Labels(self.genders, self.age_groups, self.regions)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Path):
                v = str(v)
            elif isinstance(v, dt.date):
                v = v.isoformat()
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def digest(self) -> str:
        """sha256 over the canonical JSON form of the config."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(key: str, value: str, base: Path | None):
    if key in PATH_KEYS:
        p = Path(value)
        if base is not None and not p.is_absolute():
            p = base / p
        return p
    if key in LIST_KEYS:
        return tuple(v.strip() for v in value.split(",") if v.strip())
    if key == "reference_date":
        return dt.date.fromisoformat(value)
    if key in ("window_months", "inner_max_iter", "outer_max_iter", "seed"):
        return int(value)
    if key == "threshold":
        return float(value)
    return value


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Build a :class:`RunConfig` from an optional file, then apply non-None overrides."""
    values: dict = {}
    known = {f.name for f in dataclasses.fields(RunConfig)} - {"extra"}
    extra = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        for key, raw in parse_kv(path.read_text(encoding="utf-8")).items():
            try:
                val = _coerce(key, raw, path.parent)
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from None
            if key in known:
                values[key] = val
            else:
                extra[key] = raw
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(val, str) and key not in ("outcome",):
            val = _coerce(key, val, None)
        values[key] = val
    cfg = RunConfig(**values, extra=extra)
    cfg.labels  # validates label set sizes
    if cfg.outcome not in ("dummy", "score"):
        raise ConfigError(f"outcome must be 'dummy' or 'score', got {cfg.outcome!r}")
    if not 0.0 <= cfg.threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {cfg.threshold}")
    if cfg.window_months < 1:
        raise ConfigError("window_months must be positive")
    return cfg
