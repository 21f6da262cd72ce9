"""Run configs, metrics CSVs, and summary reports for the experiment harness.

Three file dialects, all deliberately boring: a flat ``key = value`` text
config (sections spelled as dotted prefixes, no nesting or templating),
append-only CSV metrics that can be tailed while a run is alive, and a JSON
summary whose provenance block ties a finished run back to
(config hash, seed, package version).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

from . import __version__
from .agent import AgentConfig

RUN_TAGS = ("density-study", "bandit-compare", "tabular-verify", "train", "finetune")
OUT_ENV_VAR = "FLOWCRITIC_OUT"


class ConfigError(ValueError):
    pass


def parse_scalar(text: str):
    """int, then float, then bool, else the bare string."""
    t = text.strip()
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    return t


@dataclass
class RunConfig:
    """One experiment run: what to do, with which data, where to put it."""

    tag: str
    seed: int = 0
    out_dir: str | None = None
    dataset_path: str | None = None
    data: dict = field(default_factory=dict)
    algo: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in RUN_TAGS:
            raise ConfigError(f"unknown experiment tag {self.tag!r}")
        self.seed = int(self.seed)


def load_config(path: str) -> RunConfig:
    """Parse the flat text format: one ``key = value`` per line, ``#`` comments.

    Top-level keys: tag, seed, out, dataset. Dotted prefixes route everything
    else: ``data.*`` to the dataset generator, ``agent.*`` to the algorithm
    config, ``run.*`` to harness knobs (checkpoint cadence, grid resolution).
    """
    top: dict = {}
    data: dict = {}
    algo: dict = {}
    run: dict = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            parsed = parse_scalar(value)
            if key.startswith("data."):
                data[key[len("data."):]] = parsed
            elif key.startswith("agent."):
                algo[key[len("agent."):]] = parsed
            elif key.startswith("run."):
                run[key[len("run."):]] = parsed
            elif key in ("tag", "seed"):
                top[key] = parsed
            elif key == "out":
                top["out_dir"] = str(parsed)
            elif key == "dataset":
                top["dataset_path"] = str(parsed)
            else:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    if "tag" not in top:
        raise ConfigError(f"{path}: missing required key 'tag'")
    return RunConfig(**top, data=data, algo=algo, run=run)


def _canonical_lines(config: RunConfig) -> list[str]:
    lines = [f"tag={config.tag}", f"seed={config.seed}"]
    if config.dataset_path:
        lines.append(f"dataset={config.dataset_path}")
    for prefix, section in (("data", config.data), ("agent", config.algo), ("run", config.run)):
        lines.extend(f"{prefix}.{k}={section[k]!r}" for k in sorted(section))
    return lines


def config_hash(config: RunConfig) -> str:
    """Stable short digest of everything that determines the run's outputs.

    The output directory is deliberately excluded: moving a run must not
    change its identity.
    """
    blob = "\n".join(_canonical_lines(config)).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def resolve_out_dir(config: RunConfig, override: str | None = None) -> str:
    """--out flag beats the config; the env var supplies a default root."""
    out = override or config.out_dir
    if out is None:
        out = os.path.join(os.environ.get(OUT_ENV_VAR, "."), config.tag)
    os.makedirs(out, exist_ok=True)
    return out


def _widths(value) -> tuple[int, ...]:
    if isinstance(value, str):
        return tuple(int(part) for part in value.split(",") if part.strip())
    if isinstance(value, int):
        return (value,)
    return tuple(int(v) for v in value)


def agent_config(algo: dict, **defaults) -> AgentConfig:
    """Build an AgentConfig from a flat override dict.

    ``lambda`` is accepted as a key (the config file spelling) and mapped to
    the ``lam`` field; width values may be comma-separated strings.
    """
    merged = dict(defaults)
    for key, value in algo.items():
        merged["lam" if key == "lambda" else key] = value
    for key in ("actor_widths", "critic_widths", "proxy_widths"):
        if key in merged:
            merged[key] = _widths(merged[key])
    known = {f.name for f in fields(AgentConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown agent config keys: {sorted(unknown)}")
    return AgentConfig(**merged)


def append_metrics(path: str, rows: list[dict]) -> None:
    """Append rows to a CSV, writing the header only on first creation.

    An existing file's header wins: rows must carry at least those columns,
    and only those columns are written, keeping the file rectangular.
    """
    if not rows:
        return
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    if os.path.exists(path):
        with open(path, newline="") as f:
            names = next(csv.reader(f))
    else:
        names = list(rows[0])
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=names, extrasaction="ignore")
        if f.tell() == 0:
            writer.writeheader()
        writer.writerows(rows)


def read_metrics(path: str) -> list[dict]:
    """Load a metrics CSV back as a list of dicts with scalar-parsed values."""
    with open(path, newline="") as f:
        return [{k: parse_scalar(v) for k, v in row.items()} for row in csv.DictReader(f)]


@dataclass
class RunReport:
    """Where a finished run wrote its artifacts, plus the verdict."""

    summary_path: str
    passed: bool
    summary: dict


def write_report(
    out_dir: str,
    name: str,
    config: RunConfig,
    summary: dict,
    files: dict[str, str],
    passed: bool,
) -> RunReport:
    """Write ``<name>.json``; every referenced artifact must already exist."""
    for label, rel in files.items():
        if not os.path.exists(os.path.join(out_dir, rel)):
            raise FileNotFoundError(f"report references missing artifact {label}={rel}")
    doc = {
        "passed": bool(passed),
        "summary": summary,
        "files": dict(files),
        "provenance": {
            "tag": config.tag,
            "seed": config.seed,
            "config_hash": config_hash(config),
            "version": __version__,
        },
    }
    path = os.path.join(out_dir, f"{name}.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    return RunReport(summary_path=path, passed=bool(passed), summary=doc)
