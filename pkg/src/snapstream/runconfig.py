"""Run configuration and the plain-text file formats used by the command line.

A run config is one JSON document::

    {
      "schema_version": 1,
      "snapstream": {"l_max": 256, "l_sink": 4, "l_recent": 32, "k_top": 16,
                     "l_obs": 8, "pool_kernel": 7, "theta_base": 10000.0},
      "model": {"vocab_size": 64, "n_layers": 2, "n_q_heads": 2, "n_kv_heads": 1,
                "head_dim": 8, "ffn_mult": 2, "seed": 0, "eos_id": 0},
      "cost": {... CostModel fields ...},
      "run": {"mode": "snapstream", "max_new": 32, "block_len": 64,
              "stop_on_eos": true, "serve_l_max": 131072,
              "serve_l_compressed": 32768, "requests_per_slot": 3}
    }

Every section and key is optional; missing values take the defaults above.
Attention geometry lives in ``model`` only and is copied into the cache
config. Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

from .config import ModelConfig, SnapStreamConfig, _from_mapping
from .errors import ConfigError
from .scheduler import CostModel, K, ServeRequest
from .snapshot import atomic_write_bytes

SCHEMA_VERSION = 1
CONFIG_ENV = "SNAPSTREAM_CONFIG"

BUDGET_KEYS = ("l_max", "l_sink", "l_recent", "k_top", "l_obs", "pool_kernel", "theta_base")
DEFAULT_BUDGET = {"l_max": 256, "l_sink": 4, "l_recent": 32, "k_top": 16, "l_obs": 8,
                  "pool_kernel": 7, "theta_base": 10000.0}
SECTIONS = ("schema_version", "snapstream", "model", "cost", "run")


@dataclass(frozen=True)
class RunOptions:
    mode: str = "snapstream"
    max_new: int = 32
    block_len: int = 64
    stop_on_eos: bool = True
    serve_l_max: int = 128 * K
    serve_l_compressed: int = 32 * K
    requests_per_slot: int = 3

    def __post_init__(self):
        if self.mode not in ("full", "snapstream"):
            raise ConfigError(f"run.mode must be 'full' or 'snapstream', got {self.mode!r}")
        for name in ("max_new", "block_len", "serve_l_max", "serve_l_compressed",
                     "requests_per_slot"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"run.{name} must be an integer")
        if self.max_new < 0:
            raise ConfigError("run.max_new must be >= 0")
        if self.block_len < 1 or self.requests_per_slot < 1:
            raise ConfigError("run.block_len and run.requests_per_slot must be >= 1")
        if not 1 <= self.serve_l_compressed <= self.serve_l_max:
            raise ConfigError("need 1 <= run.serve_l_compressed <= run.serve_l_max")
        if not isinstance(self.stop_on_eos, bool):
            raise ConfigError("run.stop_on_eos must be a boolean")


@dataclass(frozen=True)
class RunConfig:
    """Everything one command needs, validated as a whole."""

    cache: SnapStreamConfig
    model: ModelConfig
    cost: CostModel = field(default_factory=CostModel)
    run: RunOptions = field(default_factory=RunOptions)
    source: str | None = None
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], source: str | None = None) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        sections = {}
        for name in ("snapstream", "model", "cost", "run"):
            value = data.get(name, {})
            if not isinstance(value, Mapping):
                raise ConfigError(f"[{name}] must be a JSON object")
            sections[name] = dict(value)

        budget = sections["snapstream"]
        unknown = sorted(set(budget) - set(BUDGET_KEYS))
        if unknown:
            raise ConfigError(f"unknown keys in [snapstream]: {', '.join(unknown)}"
                              " (attention geometry belongs in [model])")
        model = _from_mapping(ModelConfig, sections["model"], "model")
        cache = model.cache_config(**{**DEFAULT_BUDGET, **budget})
        try:
            cost = CostModel.from_dict(sections["cost"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[cost]: {exc}") from None
        run = _from_mapping(RunOptions, sections["run"], "run")
        return cls(cache, model, cost, run, source, version)

    @classmethod
    def default(cls) -> "RunConfig":
        return cls.from_dict({})

    def with_overrides(self, mode: str | None = None, seed: int | None = None) -> "RunConfig":
        cfg = self
        if mode is not None:
            cfg = replace(cfg, run=replace(cfg.run, mode=mode))
        if seed is not None:
            cfg = replace(cfg, model=replace(cfg.model, seed=seed))
        return cfg

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "snapstream": {k: getattr(self.cache, k) for k in BUDGET_KEYS},
            "model": asdict(self.model),
            "cost": self.cost.to_dict(),
            "run": asdict(self.run),
        }


def resolve_config_path(flag: str | None) -> str | None:
    """``--config`` wins; otherwise the environment may name a config file."""
    return flag or os.environ.get(CONFIG_ENV) or None


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig.default()
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(data, source=str(path))


def _read_text(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    return Path(path).read_text(encoding="utf-8")


def parse_prompt(text: str, cfg: RunConfig) -> list[int]:
    """Whitespace-separated token ids, checked against the vocabulary and ``l_max``."""
    try:
        tokens = [int(tok) for tok in text.split()]
    except ValueError as exc:
        raise ConfigError(f"prompt must contain integer token ids ({exc})") from None
    if not tokens:
        raise ConfigError("prompt is empty")
    vocab = cfg.model.vocab_size
    bad = [t for t in tokens if not 0 <= t < vocab]
    if bad:
        raise ConfigError(f"token id {bad[0]} outside the vocabulary [0, {vocab})")
    if len(tokens) > cfg.cache.l_max:
        raise ConfigError(f"prompt length {len(tokens)} exceeds l_max={cfg.cache.l_max}")
    return tokens


def read_prompt(path: str, cfg: RunConfig) -> list[int]:
    return parse_prompt(_read_text(path), cfg)


WORKLOAD_KEYS = ("id", "arrival_s", "prompt_len", "output_len")


def _parse_request(line: str) -> ServeRequest:
    rec = json.loads(line)
    if not isinstance(rec, dict) or set(rec) != set(WORKLOAD_KEYS):
        raise ValueError(f"expected keys {WORKLOAD_KEYS}")
    rid, arrival, prompt_len, output_len = (rec[k] for k in WORKLOAD_KEYS)
    if not isinstance(rid, (str, int)) or isinstance(rid, bool):
        raise ValueError("id must be a string or integer")
    if not isinstance(arrival, (int, float)) or isinstance(arrival, bool) or not arrival >= 0:
        raise ValueError("arrival_s must be a non-negative number")
    for value in (prompt_len, output_len):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ValueError("lengths must be integers")
    return ServeRequest(str(rid), float(arrival), prompt_len, output_len)


def parse_workload(lines: Iterable[str]) -> tuple[list[ServeRequest], list[tuple[int, str]]]:
    """Requests sorted by arrival, plus ``(line_number, reason)`` for every rejected line.

    Blank lines are skipped; duplicate ids are rejected like malformed lines.
    """
    requests: list[ServeRequest] = []
    malformed: list[tuple[int, str]] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            req = _parse_request(line)
        except (ValueError, TypeError) as exc:
            malformed.append((lineno, str(exc)))
            continue
        if req.id in seen:
            malformed.append((lineno, f"duplicate id {req.id!r}"))
            continue
        seen.add(req.id)
        requests.append(req)
    requests.sort(key=lambda r: r.arrival_time)
    return requests, malformed


def read_workload(path: str):
    return parse_workload(_read_text(path).splitlines())


def check_output_path(path: str | None) -> None:
    """Fail early, before any work, if ``path`` cannot be created."""
    if path is None or path == "-":
        return
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {parent}")
    if Path(path).is_dir():
        raise IsADirectoryError(f"output path is a directory: {path}")
    if not os.access(parent, os.W_OK):
        raise PermissionError(f"output directory is not writable: {parent}")


def jsonl_bytes(records: Iterable[Mapping[str, Any]]) -> bytes:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records).encode()


def write_output(path: str, data: bytes) -> None:
    if path == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        atomic_write_bytes(path, data)
