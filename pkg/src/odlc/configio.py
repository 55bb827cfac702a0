"""key = value config files, CSV emission, and run manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time


class ConfigError(ValueError):
    pass


def read_kv(path) -> dict:
    """Parse "key = value" lines; '#' starts a comment, blanks ignored."""
    out = {}
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{ln}: empty key")
            out[key] = value
    return out


def _coerce(text: str, pytype):
    if pytype is bool:
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from {text!r}")
    if pytype in (int, float, str):
        return pytype(text)
    if pytype is tuple:
        return tuple(float(v) for v in text.split(",") if v)
    raise ConfigError(f"unsupported config field type {pytype}")


def apply_kv(cfg, kv: dict, skip=()):
    """Rebuild a (frozen) dataclass with fields overridden from a kv dict.

    Unknown keys raise; nested dataclass fields use dotted keys
    (e.g. adam.beta1).
    """
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    updates = {}
    nested = {}
    for key, text in kv.items():
        if key in skip:
            continue
        if "." in key:
            head, rest = key.split(".", 1)
            nested.setdefault(head, {})[rest] = text
            continue
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}; known: {sorted(fields)}")
        current = getattr(cfg, key)
        pytype = type(current) if current is not None else str
        updates[key] = _coerce(text, pytype)
    for head, sub in nested.items():
        if head not in fields:
            raise ConfigError(f"unknown config key {head!r}")
        updates[head] = apply_kv(getattr(cfg, head), sub)
    return dataclasses.replace(cfg, **updates)


def config_digest(cfg) -> str:
    as_dict = dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else dict(cfg)
    blob = json.dumps(as_dict, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_csv(path, header, rows):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".8g")
    return str(v)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, configs: dict, seed, inputs: list,
                   tool_version: str):
    """Text run manifest: command, config digests, seed, input digests,
    version and timestamps."""
    lines = [
        f"command: {command}",
        f"tool_version: {tool_version}",
        f"seed: {seed}",
        f"started_utc: {time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime())}",
    ]
    for name, cfg in configs.items():
        lines.append(f"config.{name}: {config_digest(cfg)}")
    for p in inputs:
        if p and os.path.exists(p) and os.path.isfile(p):
            lines.append(f"input: {p} sha256={file_digest(p)}")
        elif p:
            lines.append(f"input: {p}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
