"""Run configuration: flat `key = value` text with section headers.

Unknown sections or keys are rejected by name; every key carries a typed
default so a missing file or section falls back to desk-scale settings.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_tuple(v: str) -> tuple:
    return tuple(int(x) for x in str(v).replace(",", " ").split())


def _float_tuple(v: str) -> tuple:
    return tuple(float(x) for x in str(v).replace(",", " ").split())


def _str_or_none(v):
    s = str(v).strip()
    return None if s in ("", "none") else s


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "seed": (int, 0),
        "out_dir": (str, "out"),
    },
    "events": {
        "path": (_str_or_none, None),
        "poses": (_str_or_none, None),
    },
    "snn": {
        "encoder_channels": (_int_tuple, (16, 32, 64)),
        "pooling_size": (int, 128),
        "checkpoint": (_str_or_none, None),
    },
    "train": {
        "steps": (int, 2000),
        "batch": (int, 16),
        "lr": (float, 1e-3),
        "decode_lr": (float, 3e-3),
        "seq_windows": (int, 20),
        "n_sequences": (int, 96),
        "val_sequences": (int, 8),
        "flow_max": (float, 1.0),
        "margin": (int, 12),
        "eval_every": (int, 100),
        "threads": (int, 1),
        "contrast_threshold": (float, 0.2),
        "resume": (_str_or_none, None),
    },
    "evolve": {
        "population": (int, 20),
        "generations": (int, 200),
        "mutation_std": (float, 0.0316227766016838),
        "repeats": (int, 2),
        "n_steps": (int, 1000),
        "setpoint_set": (str, "small"),   # small | full
        "freeze_randomization": (_bool, False),
    },
    "fly": {
        "mode": (str, "sim"),             # sim | replay
        "controller": (str, "pi"),        # evolved | pi
        "controller_path": (_str_or_none, None),
        "duration": (float, 10.0),
        "setpoint": (_float_tuple, (0.0, 0.0, 0.0)),
        "omega_z_sp": (float, 0.0),
        "frisbee": (_bool, False),
        "use_runtime_coeffs": (_bool, False),
        "noise_std": (float, 0.025),
    },
    "bench": {
        "densities": (_float_tuple, (28.6, 106.9, 186.6)),
        "inferences": (int, 1000),
    },
    "serve": {
        "host": (str, "127.0.0.1"),
        "port": (int, 8750),
        "controller_path": (_str_or_none, None),
        "telemetry_hz": (float, 20.0),
        "realtime": (_bool, True),
    },
}


@dataclass
class RunConfig:
    """Validated configuration: `cfg["section"]["key"]` with typed values."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        cfg = cls.defaults()
        if path is None:
            return cfg
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                parse, _ = SCHEMA[section][key]
                try:
                    cfg.values[section][key] = parse(raw)
                except Exception as exc:
                    raise ConfigError(f"bad value for [{section}] {key}: {raw!r} ({exc})")
        return cfg

    def override(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[section][key] = value


def default_config_text() -> str:
    """Render the full default configuration as an editable file."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default) in keys.items():
            if default is None:
                rendered = ""
            elif isinstance(default, tuple):
                rendered = ", ".join(str(v) for v in default)
            else:
                rendered = str(default)
            lines.append(f"{key} = {rendered}")
        lines.append("")
    return "\n".join(lines)
