"""Run configuration, loaded from YAML or JSON and validated up front."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .backends import BACKEND_KINDS, BackendBinding, BackendRegistry, Role
from .engine import DEFAULT_TIMEOUT
from .runtime import DEFAULT_VERIFY_THRESHOLD
from .scene import GeneratorSpec, SceneError, canonical_json, sha256_hex
from .scheduler import DispatchPolicy
from .synthesis import PRESETS, PromptConfigError, RemoteClient, ReplayClient, TemplateClient, get_preset

CLIENT_KINDS = ("replay", "template", "remote")
KIND_ALIASES = {"noisy": "noisy-exact"}
_KEYS = {"preset", "backends", "scheduler", "generator", "seed", "timeout", "isolation", "jobs",
         "verify_threshold", "retries", "out", "trace_dir", "scene_generator"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    client: str = "replay"
    replay_dir: str | None = None
    endpoint: str | None = None
    max_tokens: int = 512
    timeout: float = 60.0

    def build(self):
        if self.client == "template":
            return TemplateClient()
        if self.client == "remote":
            return RemoteClient(self.endpoint, max_tokens=self.max_tokens, timeout=self.timeout)
        return ReplayClient(self.replay_dir)


@dataclass(frozen=True)
class RunConfig:
    preset: str | None = None
    backends: Mapping[Role, BackendBinding] = field(default_factory=dict)
    scheduler: DispatchPolicy = field(default_factory=DispatchPolicy)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    seed: int = 0
    timeout: float = DEFAULT_TIMEOUT
    isolation: str = "thread"
    jobs: int = 8
    verify_threshold: float = DEFAULT_VERIFY_THRESHOLD
    retries: int = 0
    out: str = "out"
    trace_dir: str | None = None
    scene_generator: GeneratorSpec = field(default_factory=GeneratorSpec)

    def registry(self) -> BackendRegistry:
        return BackendRegistry(self.backends)

    def with_backends(self, kind: str) -> "RunConfig":
        kind = KIND_ALIASES.get(kind, kind)
        params = {"seed": self.seed} if kind == "noisy-exact" else {}
        if kind == "remote":
            # remote endpoints must come from the file; keep existing remote bindings
            bindings = dict(self.backends)
            missing = [r.value for r in Role if bindings.get(r) is None or bindings[r].kind != "remote"]
            if missing:
                raise ConfigError(f"--backends remote needs backends.<role>.endpoint for {missing}")
            return self
        return replace(self, backends={r: _binding(r, {"kind": kind, **params}) for r in Role})

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "backends": {r.value: {"kind": b.kind, **dict(b.params)} for r, b in sorted(self.backends.items())},
            "scheduler": {"max_batch_size": self.scheduler.max_batch_size, "linger": self.scheduler.linger,
                          "max_in_flight_batches": self.scheduler.max_in_flight_batches},
            "generator": {"client": self.generator.client, "replay_dir": self.generator.replay_dir,
                          "endpoint": self.generator.endpoint, "max_tokens": self.generator.max_tokens,
                          "timeout": self.generator.timeout},
            "seed": self.seed, "timeout": self.timeout, "isolation": self.isolation, "jobs": self.jobs,
            "verify_threshold": self.verify_threshold, "retries": self.retries,
            "out": self.out, "trace_dir": self.trace_dir,
        }

    def digest(self) -> str:
        """Hash of everything that can change answers (paths and parallelism excluded)."""
        d = self.to_dict()
        for k in ("out", "trace_dir", "jobs", "scheduler"):
            d.pop(k)
        d["generator"].pop("replay_dir")
        return sha256_hex(canonical_json(d))


def _binding(role: Role, spec: Any) -> BackendBinding:
    if isinstance(spec, str):
        spec = {"kind": spec}
    if not isinstance(spec, Mapping):
        raise ConfigError(f"backends.{role.value}: expected a kind name or a mapping")
    spec = dict(spec)
    raw = spec.pop("kind", "exact")
    kind = KIND_ALIASES.get(raw, raw)
    if kind not in BACKEND_KINDS:
        raise ConfigError(f"backends.{role.value}.kind: unknown kind; choose from {list(BACKEND_KINDS)}")
    try:
        return BackendBinding(role, kind, spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _parse_backends(data: Any) -> dict[Role, BackendBinding]:
    if data is None:
        return {}
    if isinstance(data, str):
        return {r: _binding(r, data) for r in Role}
    if not isinstance(data, Mapping):
        raise ConfigError("backends: expected a kind name or a mapping of role -> binding")
    out = {}
    default = data.get("default")
    for key, spec in data.items():
        if key == "default":
            continue
        try:
            role = Role(key)
        except ValueError:
            raise ConfigError(f"backends.{key}: unknown role; choose from {[r.value for r in Role]}") from None
        out[role] = _binding(role, spec)
    if default is not None:
        for r in Role:
            out.setdefault(r, _binding(r, default))
    return out


def _number(data: Mapping, key: str, kind, default, minimum=None):
    value = data.get(key, default)
    if value is None:
        return default
    if isinstance(value, bool) or not isinstance(value, (int, float)) or (kind is int and not isinstance(value, int)):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{key}: must be >= {minimum}")
    return kind(value)


def config_from_dict(data: Mapping | None, base_dir: str | Path | None = None) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - _KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    base = Path(base_dir) if base_dir is not None else None

    def path(value):
        if value is None:
            return None
        p = Path(value)
        return str(base / p) if base is not None and not p.is_absolute() else str(p)

    preset = data.get("preset")
    if preset is not None:
        try:
            get_preset(preset)
        except PromptConfigError as exc:
            raise ConfigError(f"preset: {exc}") from None

    sched = data.get("scheduler") or {}
    if not isinstance(sched, Mapping):
        raise ConfigError("scheduler: expected a mapping")
    extra = set(sched) - {"max_batch_size", "linger", "max_in_flight_batches"}
    if extra:
        raise ConfigError(f"scheduler: unknown keys {sorted(extra)}")
    try:
        policy = DispatchPolicy(_number(sched, "max_batch_size", int, 16), _number(sched, "linger", float, 0.010),
                                _number(sched, "max_in_flight_batches", int, 2))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    gen = data.get("generator") or {}
    if isinstance(gen, str):
        gen = {"client": gen}
    extra = set(gen) - {"client", "replay_dir", "endpoint", "max_tokens", "timeout"}
    if extra:
        raise ConfigError(f"generator: unknown keys {sorted(extra)}")
    client = gen.get("client", "replay")
    if client not in CLIENT_KINDS:
        raise ConfigError(f"generator.client: unknown client {client!r}; choose from {list(CLIENT_KINDS)}")
    if client == "replay" and not gen.get("replay_dir"):
        raise ConfigError("generator.replay_dir: required for the replay client")
    if client == "remote" and not gen.get("endpoint"):
        raise ConfigError("generator.endpoint: required for the remote client")
    generator = GeneratorConfig(client, path(gen.get("replay_dir")), gen.get("endpoint"),
                                _number(gen, "max_tokens", int, 512, 1), _number(gen, "timeout", float, 60.0))

    isolation = data.get("isolation", "thread")
    if isolation not in ("thread", "process"):
        raise ConfigError(f"isolation: expected 'thread' or 'process', got {isolation!r}")
    threshold = _number(data, "verify_threshold", float, DEFAULT_VERIFY_THRESHOLD)
    if not 0 <= threshold <= 1:
        raise ConfigError("verify_threshold: must lie in [0, 1]")
    timeout = _number(data, "timeout", float, DEFAULT_TIMEOUT)
    if timeout <= 0:
        raise ConfigError("timeout: must be > 0")
    try:
        scene_gen = GeneratorSpec.from_dict(data.get("scene_generator"))
        scene_gen.check()
    except (SceneError, TypeError) as exc:
        raise ConfigError(str(exc)) from None

    return RunConfig(
        preset=preset, backends=_parse_backends(data.get("backends")), scheduler=policy, generator=generator,
        seed=_number(data, "seed", int, 0), timeout=timeout, isolation=isolation,
        jobs=_number(data, "jobs", int, 8, 1), verify_threshold=threshold,
        retries=_number(data, "retries", int, 0, 0), out=path(data.get("out")) or "out",
        trace_dir=path(data.get("trace_dir")), scene_generator=scene_gen,
    )


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{p}: {exc.strerror or exc}") from None
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{p}: not valid {'JSON' if p.suffix == '.json' else 'YAML'}: {exc}") from None
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError(f"{p}: top level must be a mapping")
    return config_from_dict(data, base_dir=p.parent)


__all__ = ["ConfigError", "GeneratorConfig", "RunConfig", "config_from_dict", "load_config", "PRESETS"]
