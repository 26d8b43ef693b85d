"""Configuration schema, dataset ingestion, persistence, and run manifests.

Formats: JSON for configs and verdicts (human-diffable), CSV for tables
(plot-ready, full-precision reprs that re-parse bitwise), and a checksummed
little-endian binary layout for trajectories.  Manifests are written
atomically at run end and record everything needed to replay the run:
config echo, seed, derived quantities, and an inventory of output files
with SHA-256 checksums.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import jsonschema

from .dynamics import Trajectory
from .model import DataAtom, DataDistribution, Hyperparams

__all__ = [
    "ConfigError",
    "RunManifest",
    "load_config",
    "validate_config",
    "load_dataset",
    "save_dataset",
    "save_trajectory",
    "load_trajectory",
    "trajectory_to_csv",
    "write_csv",
    "write_json",
    "output_root",
    "CONFIG_SCHEMA",
]

_MAGIC = b"CHAOSTRJ"
_VERSION = 1


class ConfigError(ValueError):
    """Invalid run configuration; carries the offending field when known."""

    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field_name = field_name


# ----------------------------- config schema -----------------------------

_HYPER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "alpha": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta": {"type": "number", "minimum": 0, "maximum": 1},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "M": {"type": "integer", "minimum": 1},
        "eta": {"type": "number", "minimum": 0},
        "T": {"type": "number", "minimum": 0},
        "dt": {"type": "number", "exclusiveMinimum": 0},
    },
}

_PROBLEM_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "feature": {"type": "string"},
        "loss": {"type": "string"},
        "penalty": {"type": "number", "minimum": 0},
        "p": {"type": "integer", "minimum": 1},
        "labels": {"enum": ["noisy", "realizable", "single"]},
        "teacher": {"type": "number"},
        "init_kind": {"enum": ["uniform", "dirac"]},
        "init_low": {"type": "number"},
        "init_high": {"type": "number"},
        "init_w0": {"type": "number"},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "chaoslab run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "hyper": _HYPER_SCHEMA,
        "problem": _PROBLEM_SCHEMA,
        "dataset": {"type": "string"},
        "engine": {"enum": ["sgd", "msgld", "interacting-sde", "meanfield-ode", "meanfield-sde"]},
        "statistic": {"enum": ["ensemble_mean", "particle0"]},
        "N": {"type": "integer", "minimum": 1},
        "N_grid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "N_ref": {"type": "integer", "minimum": 1},
        "m": {"type": "integer", "minimum": 1},
        "reps": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "seeds": {"type": "integer", "minimum": 2},
        "betas": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "gammas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "batches": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "snapshot_times": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "sigma_override": {"type": "number", "minimum": 0},
        "n_bins": {"type": "integer", "minimum": 2},
        "n_cells": {"type": "integer", "minimum": 4},
        "grid_lo": {"type": "number"},
        "grid_hi": {"type": "number"},
        "tol": {"type": "number", "minimum": 0},
        "max_iter": {"type": "integer", "minimum": 1},
        "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "horizon": {"type": "number", "minimum": 0},
        "slope_threshold": {"type": "number"},
        "endpoint_ratio": {"type": "number", "exclusiveMinimum": 0},
        "ratio_threshold": {"type": "number", "exclusiveMinimum": 0},
        "decrease_factor": {"type": "number", "exclusiveMinimum": 0},
        "budget_s": {"type": "number", "exclusiveMinimum": 0},
        "probes": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "samples_a": {"type": "string"},
        "samples_b": {"type": "string"},
    },
}


def validate_config(cfg: dict) -> dict:
    """Schema-validate a raw config dict; unknown keys are rejected."""
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(q) for q in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {path}: {exc.message}", path) from exc
    if "hyper" in cfg:
        try:
            Hyperparams(**cfg["hyper"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config field hyper: {exc}", "hyper") from exc
    return cfg


def load_config(path: str | Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return validate_config(cfg)


# ----------------------------- datasets -----------------------------


def load_dataset(path: str | Path) -> DataDistribution:
    """Read a CSV dataset with columns x_1..x_d, y and optional weight.

    Weights default to uniform and are normalized; malformed rows are
    reported with their line number.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"dataset {path} is empty") from None
        header = [h.strip() for h in header]
        x_cols = [i for i, h in enumerate(header) if h.startswith("x_")]
        if not x_cols or "y" not in header:
            raise ConfigError(f"dataset {path} must have columns x_1..x_d and y")
        y_col = header.index("y")
        w_col = header.index("weight") if "weight" in header else None
        atoms = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                x = np.array([float(row[i]) for i in x_cols])
                y = float(row[y_col])
                w = float(row[w_col]) if w_col is not None else 1.0
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"dataset {path} line {lineno}: malformed row ({exc})") from exc
            atoms.append(DataAtom(x, y, w))
    if not atoms:
        raise ConfigError(f"dataset {path} has no data rows")
    return DataDistribution(atoms)


def save_dataset(pi: DataDistribution, path: str | Path):
    rows = [
        {**{f"x_{i+1}": repr(float(v)) for i, v in enumerate(a.x)},
         "y": repr(float(a.y)), "weight": repr(float(a.weight))}
        for a in pi.atoms
    ]
    write_csv(path, rows)


# ----------------------------- trajectory binary format -----------------------------
#
# Layout (little-endian):
#   magic (8 bytes) | version u32 | header_len u64 | header JSON (utf-8)
#   | times float64[n_times] | ensembles float64[n_times * N * p]
#   | sha256 of everything above (32 bytes)


def save_trajectory(traj: Trajectory, path: str | Path):
    header = {
        "kind": traj.kind,
        "n_times": int(len(traj.times)),
        "N": int(traj.n_particles),
        "p": int(traj.p),
        "hyper": asdict(traj.hyper),
        "meta": {k: v for k, v in traj.meta.items()
                 if isinstance(v, (int, float, str, bool, type(None)))},
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join([
        _MAGIC,
        struct.pack("<I", _VERSION),
        struct.pack("<Q", len(hdr)),
        hdr,
        np.ascontiguousarray(traj.times, dtype="<f8").tobytes(),
        np.ascontiguousarray(traj.ensembles, dtype="<f8").tobytes(),
    ])
    payload = body + hashlib.sha256(body).digest()
    _atomic_write_bytes(Path(path), payload)


def load_trajectory(path: str | Path) -> Trajectory:
    raw = Path(path).read_bytes()
    if len(raw) < 52 or raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not a trajectory file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch (truncated or corrupted file)")
    version = struct.unpack("<I", body[8:12])[0]
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported trajectory version {version}")
    hdr_len = struct.unpack("<Q", body[12:20])[0]
    header = json.loads(body[20:20 + hdr_len].decode("utf-8"))
    off = 20 + hdr_len
    n_times, N, p = header["n_times"], header["N"], header["p"]
    times = np.frombuffer(body, dtype="<f8", count=n_times, offset=off).copy()
    off += 8 * n_times
    ens = np.frombuffer(body, dtype="<f8", count=n_times * N * p, offset=off)
    return Trajectory(
        kind=header["kind"],
        times=times,
        ensembles=ens.reshape(n_times, N, p).copy(),
        hyper=Hyperparams(**header["hyper"]),
        meta=header.get("meta", {}),
    )


def trajectory_to_csv(traj: Trajectory, path: str | Path):
    """Flat CSV export: one row per (time, particle), full-precision reprs."""
    rows = []
    for t, ens in zip(traj.times, traj.ensembles):
        for k in range(ens.shape[0]):
            row = {"time": repr(float(t)), "particle": k}
            for j in range(ens.shape[1]):
                row[f"w_{j+1}"] = repr(float(ens[k, j]))
            rows.append(row)
    write_csv(path, rows)


# ----------------------------- generic writers -----------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def write_csv(path: str | Path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in cols))
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def write_json(path: str | Path, obj):
    _atomic_write_bytes(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _atomic_write_bytes(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ----------------------------- manifests -----------------------------


@dataclass
class RunManifest:
    """Replayable record of one run: config + seed suffice to reproduce it."""

    command: str
    config: dict
    seed: int
    derived: dict = field(default_factory=dict)
    code_version: str = ""
    started_at: str = ""
    finished_at: str = ""
    outputs: dict[str, str] = field(default_factory=dict)  # path -> sha256

    @staticmethod
    def start(command: str, config: dict, seed: int, derived: dict | None = None) -> "RunManifest":
        return RunManifest(
            command=command,
            config=config,
            seed=seed,
            derived=derived or {},
            code_version=_code_version(),
            started_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        )

    def finish(self, out_dir: str | Path, files: list[str | Path]) -> Path:
        self.finished_at = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        out_dir = Path(out_dir)
        for f in files:
            f = Path(f)
            self.outputs[str(f.relative_to(out_dir) if f.is_relative_to(out_dir) else f)] = sha256_file(f)
        path = out_dir / "manifest.json"
        write_json(path, asdict(self))
        return path


def _code_version() -> str:
    import subprocess

    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import version, PackageNotFoundError

    try:
        return "chaoslab-" + version("chaoslab")
    except PackageNotFoundError:
        return "chaoslab-unknown"


def output_root(cli_out: str | None) -> Path:
    """Output directory: --out flag, else CHAOSLAB_OUT env var, else ./chaoslab-out."""
    if cli_out:
        return Path(cli_out)
    env = os.environ.get("CHAOSLAB_OUT")
    return Path(env) if env else Path("chaoslab-out")
