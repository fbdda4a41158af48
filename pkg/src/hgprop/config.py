"""``key=value`` run configuration with defaults for every pipeline stage."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dump: Path | None = None
    screen: Path | None = None
    work_dir: Path = Path("run")
    dim: int = 128
    hidden: int = 256
    num_hops: int = 3
    epochs: int = 300
    lr: float = 0.01
    dropout: float = 0.0
    batch_size: int = 0  # 0: full batch
    threshold: float = 0.5
    seed: int = 0
    embed_seed: int = 0
    class_count: int = 2000
    kmeans_iters: int = 100
    instance_of: str = "P31"
    isolated_policy: str = "zero"
    type_combine: str = "mean"
    add_reverse: bool = False
    block_size: int = 0  # 0: in-memory propagation
    sample_size: int = 0  # 0: no subsampling
    high_degree_fraction: float = 0.5
    restart_prob: float = 0.15
    model: str = "r_sagn"

    PATH_KEYS = ("dump", "screen", "work_dir")

    def replace(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def resolved(self, base: Path) -> "RunConfig":
        changes = {}
        for key in self.PATH_KEYS:
            value = getattr(self, key)
            if value is not None:
                changes[key] = (base / Path(value)).resolve()
        return dataclasses.replace(self, **changes)


def _coerce(name: str, raw: str, default):
    kind = type(default) if default is not None else Path
    if name in RunConfig.PATH_KEYS:
        return Path(raw)
    if kind is bool:
        lowered = raw.lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return lowered in ("true", "1", "yes")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config(text: str) -> dict:
    defaults = {f.name: f.default for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value")
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, defaults[key])
    return values


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Read a config file; relative paths resolve against the file's directory."""
    if path is None:
        return RunConfig().resolved(Path.cwd())
    path = Path(path)
    cfg = RunConfig(**parse_config(path.read_text(encoding="utf-8")))
    return cfg.resolved(path.parent)
