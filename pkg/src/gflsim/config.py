"""Run configuration files: flat ``section.key = value`` lines.

Missing keys take per-task defaults; unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .fedruntime.runtime import BASELINES, DP_TARGETS, DPConfig, TrainingConfig
from .graphgen import CONVENTIONS, NOISE_MODES, TASKS, CsbmParams
from .labkit.experiments import TaskSpec


class ConfigError(ValueError):
    pass


TASK_DEFAULTS: dict[str, dict[str, Any]] = {
    "dnc": {
        "task.n": 200, "task.d": 8.0, "task.lambda": 2.0, "task.mu": 1.0, "task.p": 100,
        "task.per_client": 1, "task.split": (0.1, 0.1, 0.8),
        "train.eta": 0.5, "train.T": 3000, "train.batch": 1,
    },
    "snc": {
        "task.n": 200, "task.d": 10.0, "task.lambda": 2.0, "task.mu": 1.0, "task.p": 100,
        "task.per_client": 40, "task.split": (0.1, 0.1, 0.8),
        "train.eta": 0.2, "train.T": 5000, "train.batch": 40,
    },
    "sc": {
        "task.n": 50, "task.d": 5.0, "task.lambda": 2.2, "task.mu": 0.1, "task.p": 100,
        "task.per_client": 120, "task.split": (10.0, 10.0, 100.0),
        "train.eta": 0.2, "train.T": 2000, "train.batch": 5,
    },
}

# baseline overrides applied on top of the task defaults
BASELINE_DEFAULTS: dict[str, dict[str, Any]] = {
    "none": {},
    "fedmlp": {"train.eta": 0.1},
    "local_mlps": {"train.eta": 0.1, "train.T": 200},
}

COMMON_DEFAULTS: dict[str, Any] = {
    "task.noise": "sqrt_p",
    "task.topology_seed": 0,
    "model.hidden": 64,
    "model.alpha": 0.1,
    "model.M": 10,
    "model.propagation": "teleport",
    "train.I": 10,
    "train.seeds": (0,),
    "dp.target": "none",
    "dp.sigma": 0.0,
    "baseline.kind": "none",
    "io.out_dir": "out",
    "io.data_dir": "",
}


def parse_split(text: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in text.split("/")]
    if len(parts) != 3:
        raise ValueError("split needs three parts like 10/10/80")
    vals = tuple(float(p) for p in parts)
    if min(vals) < 0 or sum(vals) <= 0:
        raise ValueError("split parts must be nonnegative with a positive sum")
    return vals  # type: ignore[return-value]


def parse_seeds(text: str) -> tuple[int, ...]:
    """``0-19``, ``1,4,9`` or a mix such as ``0-3,10``."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, dash, hi = part.partition("-")
        if dash:
            a, b = int(lo), int(hi)
            if b < a:
                raise ValueError(f"empty seed range {part}")
            seeds.extend(range(a, b + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return tuple(seeds)


def _choice(options) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


PARSERS: dict[str, Callable[[str], Any]] = {
    "task.kind": _choice(TASKS),
    "task.n": int, "task.d": float, "task.lambda": float, "task.mu": float, "task.p": int,
    "task.per_client": int, "task.split": parse_split, "task.noise": _choice(NOISE_MODES),
    "task.topology_seed": int,
    "model.hidden": int, "model.alpha": float, "model.M": int,
    "model.propagation": _choice(CONVENTIONS),
    "train.eta": float, "train.T": int, "train.I": int, "train.batch": int, "train.seeds": parse_seeds,
    "dp.target": _choice(("none",) + DP_TARGETS), "dp.sigma": float,
    "baseline.kind": _choice(BASELINES),
    "io.out_dir": str, "io.data_dir": str,
}
KEYS = tuple(PARSERS)


def _render(key: str, v: Any) -> str:
    if key == "task.split":
        return "/".join(f"{x:g}" for x in v)
    if key == "train.seeds":
        s = list(v)
        if len(s) > 2 and s == list(range(s[0], s[-1] + 1)):
            return f"{s[0]}-{s[-1]}"
        return ",".join(str(x) for x in s)
    return str(v)


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def kind(self) -> str:
        return self.values["task.kind"]

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.values["train.seeds"]

    def with_values(self, **changes: Any) -> "RunConfig":
        """Copy with ``section.key`` overrides (keys given with ``__`` for ``.``)."""
        vals = dict(self.values)
        for k, v in changes.items():
            key = k.replace("__", ".")
            if key not in PARSERS:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = v
        return _validated(vals, "<override>")

    def task_spec(self) -> TaskSpec:
        v = self.values
        prm = CsbmParams(v["task.n"], v["task.d"], v["task.lambda"], v["task.mu"], v["task.p"])
        return TaskSpec(v["task.kind"], prm, v["task.per_client"], v["task.split"], v["task.noise"], v["task.topology_seed"])

    def training(self, seed: int | None = None, threads: int = 1, transport: str = "inproc") -> TrainingConfig:
        v = self.values
        dp = None if v["dp.target"] == "none" else DPConfig(v["dp.target"], v["dp.sigma"])
        return TrainingConfig(
            eta=v["train.eta"], T=v["train.T"], I=v["train.I"], batch_size=v["train.batch"],
            alpha=v["model.alpha"], M=v["model.M"], propagation=v["model.propagation"],
            hidden=v["model.hidden"], task=v["task.kind"], dp=dp, baseline=v["baseline.kind"],
            seed=self.seeds[0] if seed is None else seed, threads=threads, transport=transport,
        )

    def lines(self) -> list[str]:
        return [f"{k} = {_render(k, self.values[k])}" for k in KEYS]


def _validated(vals: dict[str, Any], source: str) -> RunConfig:
    cfg = RunConfig(vals)
    try:
        cfg.task_spec()
        cfg.training()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if vals["dp.target"] != "none" and vals["baseline.kind"] != "none":
        raise ConfigError(f"{source}: dp applies to hidden sharing and needs baseline.kind = none")
    if vals["task.kind"] == "dnc" and vals["task.per_client"] != 1:
        raise ConfigError(f"{source}: dnc has exactly one row per client")
    return cfg


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    raw: dict[str, tuple[int, str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        if key not in PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: {key} set twice")
        raw[key] = (lineno, val)
    return resolve(raw, source)


def resolve(raw: dict[str, tuple[int, str]], source: str = "<config>") -> RunConfig:
    kind = raw.get("task.kind", (0, "dnc"))[1]
    base = raw.get("baseline.kind", (0, "none"))[1]
    if kind not in TASK_DEFAULTS:
        raise ConfigError(f"{source}: task.kind must be one of {', '.join(TASKS)}")
    if base not in BASELINE_DEFAULTS:
        raise ConfigError(f"{source}: baseline.kind must be one of {', '.join(BASELINES)}")
    vals: dict[str, Any] = {"task.kind": kind, **COMMON_DEFAULTS, **TASK_DEFAULTS[kind], **BASELINE_DEFAULTS[base]}
    for key, (lineno, text) in raw.items():
        try:
            vals[key] = PARSERS[key](text)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return _validated({k: vals[k] for k in KEYS}, source)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror or exc})") from None
    return parse_config(text, str(path))


def default_config(kind: str = "dnc", **overrides: Any) -> RunConfig:
    raw = {"task.kind": (0, kind)}
    cfg = resolve(raw)
    return cfg.with_values(**overrides) if overrides else cfg
