"""Experiment configuration: a nested YAML document validated key by key.

Unknown keys are rejected with the offending key path and its line number.
"""

from __future__ import annotations

import dataclasses
import hashlib
import inspect
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .envs import GridChain, PointMassReach, RoadAndRocks
from .errors import ConfigError
from .loop import LoopConfig

ENVIRONMENTS = {
    "point_mass_reach": PointMassReach,
    "road_and_rocks": RoadAndRocks,
    "grid_chain": GridChain,
}
MODES = ("online", "offline")
# scheme, divergence and seed live at the top level of the document
LOOP_KEYS = tuple(f.name for f in dataclasses.fields(LoopConfig) if f.name not in ("scheme", "divergence", "seed"))
DATASET_KEYS = ("path", "n_random", "n_expert_traj", "seed")


def env_parameters(name: str) -> dict:
    """Constructor parameters (and defaults) accepted by an environment."""
    cls = ENVIRONMENTS[name]
    if dataclasses.is_dataclass(cls):
        return {f.name: f.default for f in dataclasses.fields(cls)
                if f.init and f.name != "clipped_actions" and f.default is not dataclasses.MISSING}
    sig = inspect.signature(cls.__init__)
    return {k: p.default for k, p in sig.parameters.items() if k != "self"}


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    mode: str = "online"
    env: str = "point_mass_reach"
    env_params: dict = field(default_factory=dict)
    loop: dict = field(default_factory=dict)
    scheme: str = "uniform"
    divergence: str = "chi_squared"
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    dataset: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"env.name must be one of {sorted(ENVIRONMENTS)}, got {self.env!r}")
        if self.mode == "offline" and self.env != "road_and_rocks":
            raise ConfigError("offline mode is only wired up for road_and_rocks")
        if not self.seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in self.seeds):
            raise ConfigError(f"seeds must be a non-empty list of integers, got {self.seeds!r}")
        self.loop_config(self.seeds[0])  # validate eagerly

    def loop_config(self, seed: int) -> LoopConfig:
        try:
            return LoopConfig(**self.loop, scheme=self.scheme, divergence=self.divergence, seed=seed)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def make_env(self):
        return ENVIRONMENTS[self.env](**self.env_params)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "mode": self.mode,
            "env": {"name": self.env, **self.env_params},
            "loop": dict(self.loop), "scheme": self.scheme, "divergence": self.divergence,
            "seeds": list(self.seeds), "output_dir": self.output_dir, "dataset": dict(self.dataset),
        }

    def resolved(self, seed: int) -> dict:
        """Every effective setting for one seeded run, defaults filled in."""
        doc = self.to_dict()
        doc["loop"] = {k: v for k, v in self.loop_config(seed).to_dict().items()
                       if k not in ("scheme", "divergence", "seed")}
        doc["env"] = {"name": self.env, **env_parameters(self.env), **self.env_params}
        doc["env"] = {k: list(v) if isinstance(v, tuple) else v for k, v in doc["env"].items()}
        doc["seed"] = seed
        doc.pop("seeds")
        doc.pop("output_dir")
        return doc

    def hash(self, seed: int) -> str:
        canon = json.dumps(self.resolved(seed), sort_keys=True, default=str)
        return hashlib.sha256(canon.encode()).hexdigest()


def _fail(msg: str, node=None) -> ConfigError:
    if node is not None:
        msg = f"{msg} (line {node.start_mark.line + 1})"
    return ConfigError(msg)


def _mapping(node, where: str) -> dict:
    if not isinstance(node, yaml.MappingNode):
        raise _fail(f"{where} must be a mapping", node)
    out = {}
    for k, v in node.value:
        key = yaml.safe_load(yaml.serialize(k))
        if key in out:
            raise _fail(f"duplicate key {where + '.' if where != 'document' else ''}{key}", k)
        out[key] = (k, v)
    return out


def _value(node):
    return yaml.safe_load(yaml.serialize(node))


def _check_keys(entries: dict, allowed, where: str) -> None:
    for key, (knode, _) in entries.items():
        if key not in allowed:
            path = key if where == "document" else f"{where}.{key}"
            raise _fail(f"unknown key {path!r}", knode)


TOP_KEYS = ("name", "mode", "env", "loop", "scheme", "divergence", "seeds", "output_dir", "dataset")


def parse_config(text: str) -> ExperimentConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from None
    if root is None:
        return ExperimentConfig()
    top = _mapping(root, "document")
    _check_keys(top, TOP_KEYS, "document")
    kw: dict = {}
    for key in ("name", "mode", "scheme", "divergence", "output_dir"):
        if key in top:
            kw[key] = _value(top[key][1])
    if "seeds" in top:
        seeds = _value(top["seeds"][1])
        kw["seeds"] = seeds if isinstance(seeds, list) else [seeds]
    env_name = ExperimentConfig.env
    if "env" in top:
        env_entries = _mapping(top["env"][1], "env")
        if "name" in env_entries:
            env_name = _value(env_entries["name"][1])
        if env_name not in ENVIRONMENTS:
            raise _fail(f"unknown environment {env_name!r}", env_entries.get("name", (top["env"][0],))[0])
        _check_keys(env_entries, ("name", *env_parameters(env_name)), "env")
        kw["env"] = env_name
        kw["env_params"] = {k: _value(v) for k, (_, v) in env_entries.items() if k != "name"}
        kw["env_params"] = {k: tuple(v) if isinstance(v, list) else v for k, v in kw["env_params"].items()}
    if "loop" in top:
        loop_entries = _mapping(top["loop"][1], "loop")
        _check_keys(loop_entries, LOOP_KEYS, "loop")
        kw["loop"] = {k: _value(v) for k, (_, v) in loop_entries.items()}
    if "dataset" in top:
        ds_entries = _mapping(top["dataset"][1], "dataset")
        _check_keys(ds_entries, DATASET_KEYS, "dataset")
        kw["dataset"] = {k: _value(v) for k, (_, v) in ds_entries.items()}
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text())


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``key=value`` strings; dotted keys reach into ``env.``, ``loop.`` and ``dataset.``.

    ``seed=N`` is shorthand for ``seeds=[N]``.
    """
    doc = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw) if raw else ""
        parts = key.split(".")
        if parts == ["seed"]:
            doc["seeds"] = [value]
        elif len(parts) == 1:
            if parts[0] not in TOP_KEYS or parts[0] in ("env", "loop", "dataset"):
                raise ConfigError(f"unknown override key {key!r}")
            doc[parts[0]] = value if parts[0] != "seeds" or isinstance(value, list) else [value]
        elif len(parts) == 2 and parts[0] in ("env", "loop", "dataset"):
            doc[parts[0]][parts[1]] = value
        else:
            raise ConfigError(f"unknown override key {key!r}")
    return parse_config(yaml.safe_dump(doc, sort_keys=False))


def reference_yaml() -> str:
    """Every configurable key with its default value."""
    lines = ["# tomrl experiment configuration reference (all defaults)",
             "name: experiment",
             f"mode: online            # one of {', '.join(MODES)}",
             "scheme: uniform         # one of uniform, tom, pmac",
             "divergence: chi_squared # one of chi_squared, kl",
             "seeds: [0]",
             "output_dir: runs        # overridden by $TOMRL_OUTPUT_ROOT",
             "env:",
             f"  name: point_mass_reach  # one of {', '.join(sorted(ENVIRONMENTS))}"]
    for name in sorted(ENVIRONMENTS):
        lines.append(f"  # parameters for {name}:")
        for k, v in env_parameters(name).items():
            v = list(v) if isinstance(v, tuple) else v
            lines.append(f"  #   {k}: {json.dumps(v) if not isinstance(v, float) else repr(v)}")
    lines.append("loop:")
    defaults = LoopConfig()
    for k in LOOP_KEYS:
        v = getattr(defaults, k)
        lines.append(f"  {k}: {json.dumps(v)}")
    lines += ["dataset:                # offline mode only",
              "  path: null            # CSV buffer; generated when null",
              "  n_random: 20000",
              "  n_expert_traj: 5",
              "  seed: 0"]
    return "\n".join(lines) + "\n"
