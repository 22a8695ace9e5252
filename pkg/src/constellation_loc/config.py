"""Flat ``key = value`` config files with sections, and run manifests."""

from __future__ import annotations

import configparser
import hashlib
import json
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .synth import config_from_dict


class ConfigError(ValueError):
    """Config problem; the message names the file, line and key when known."""


class ConfigFile:
    """Parsed config that remembers where each key was written."""

    def __init__(self, text: str = "", path: str = "<config>"):
        self.path = path
        self.parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
        self.parser.optionxform = str
        try:
            self.parser.read_string(text, source=path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        self.lines: dict[tuple[str, str], int] = {}
        section = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line[0] in "#;":
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
            elif section is not None and ("=" in line or ":" in line):
                key = line.split("=", 1)[0].split(":", 1)[0].strip()
                self.lines[(section, key)] = lineno

    @classmethod
    def read(cls, path) -> "ConfigFile":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config not found: {path}")
        return cls(path.read_text(), str(path))

    def sections(self) -> list[str]:
        return self.parser.sections()

    def section(self, name: str) -> dict[str, str]:
        return dict(self.parser[name]) if self.parser.has_section(name) else {}

    def where(self, section: str, key: str) -> str:
        line = self.lines.get((section, key))
        return f"{self.path}:{line}" if line else self.path

    def build(self, cls, section: str, overrides: dict | None = None):
        """Dataclass ``cls`` from ``[section]``; unknown or malformed keys raise ConfigError."""
        values = self.section(section)
        for key, raw in values.items():
            try:
                config_from_dict(cls, {key: raw}, section)
            except KeyError:
                raise ConfigError(
                    f"{self.where(section, key)}: unknown key {key!r} in [{section}]"
                ) from None
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{self.where(section, key)}: bad value for {key!r}: {exc}") from None
        cfg = config_from_dict(cls, values, section)
        return replace(cfg, **overrides) if overrides else cfg

    def check_sections(self, allowed) -> None:
        for name in self.sections():
            if not any(name == a or (a.endswith(".") and name.startswith(a)) for a in allowed):
                line = next((n for (s, _), n in self.lines.items() if s == name), None)
                raise ConfigError(f"{self.path}: unknown section [{name}]; expected one of {', '.join(allowed)}"
                                  + (f" (near line {line})" if line else ""))


def tool_version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        return "0+unknown"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: list[str] = field(default_factory=list)
    outputs: dict[str, str] = field(default_factory=dict)
    tool_version: str = field(default_factory=tool_version)
    python: str = field(default_factory=lambda: f"{platform.python_implementation()} {sys.version.split()[0]}")
    started: float = field(default_factory=time.time)
    finished: float | None = None
    wall_seconds: float | None = None
    status: str = "ok"

    def add_output(self, path) -> None:
        self.outputs[Path(path).name] = file_digest(path)

    def write(self, directory) -> Path:
        self.finished = time.time()
        self.wall_seconds = self.finished - self.started
        path = Path(directory) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        return path


def snapshot(**cfgs) -> dict:
    return {k: asdict(v) if hasattr(v, "__dataclass_fields__") else v for k, v in cfgs.items()}
