"""Ground-state cache and the append-only CSV ledger with JSON sidecars."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from pathlib import Path

import numpy as np

from .ground_state import FORMAT_VERSION, GroundState, solve_ground_state

log = logging.getLogger(__name__)

CACHE_ENV = "SPIKES_CACHE_DIR"

# Frozen column lists.  New columns may only be appended at the end.
SCHEMAS = {
    "ground_state": ["config_hash", "dim", "p", "r_max", "tol", "w0", "I_w", "gamma",
                     "lambda1", "A_n"],
    "reduce": ["config_hash", "k", "rho", "epsilon", "star_norm", "iterations",
               "orthogonality_defect", "c_max", "pde_residual"],
    "energy": ["config_hash", "k", "rho", "epsilon", "M_eps", "k_I_w", "boundary_sum",
               "pair_sum", "discrepancy", "wall_time"],
    "ladder": ["config_hash", "k", "C_k", "step_margin", "threshold", "step_status",
               "pair_margin", "reflection_margin", "interior", "c_max", "residual",
               "newton_iterations", "count", "min_u", "certificate", "Q"],
    "certify": ["config_hash", "k", "c_max", "residual", "newton_iterations", "count",
                "min_u", "dominance_ratio", "passed"],
    "asymptotics": ["config_hash", "sweep", "distance", "quadrature", "prediction", "ratio",
                    "envelope", "status"],
}


def cache_directory(explicit: str | None = None) -> Path | None:
    path = explicit or os.environ.get(CACHE_ENV)
    return Path(path) if path else None


def ground_state_key(dim: int, p: float, r_max: float, tol: float) -> str:
    text = json.dumps({"dim": dim, "p": float(p), "r_max": float(r_max), "tol": float(tol),
                       "version": FORMAT_VERSION}, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def cached_ground_state(dim: int, p: float, *, r_max: float = 40.0, tol: float = 1e-10,
                        cache_dir: str | Path | None = None) -> tuple[GroundState, bool]:
    """Load the table from the cache when present, otherwise solve and store it.

    Returns (ground state, whether the cache was hit).
    """
    directory = cache_directory(str(cache_dir) if cache_dir else None)
    path = None
    if directory is not None:
        path = directory / f"ground-state-{ground_state_key(dim, p, r_max, tol)}.json"
        if path.exists():
            log.info("ground-state cache hit: %s", path)
            return GroundState.load(path), True
    gs = solve_ground_state(dim, p, r_max=r_max, tol=tol)
    if path is not None:
        directory.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        gs.save(tmp)
        tmp.replace(path)
        log.info("ground-state cached at %s", path)
    return gs, False


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


class Ledger:
    """CSV tables (one per kind of row) and JSON sidecars under one directory."""

    def __init__(self, directory, config_hash: str):
        self.directory = Path(directory)
        self.config_hash = config_hash

    def table_path(self, table: str) -> Path:
        return self.directory / f"{table}.csv"

    def append(self, table: str, rows) -> Path:
        columns = SCHEMAS[table]
        path = self.table_path(table)
        self.directory.mkdir(parents=True, exist_ok=True)
        fresh = not path.exists() or path.stat().st_size == 0
        if not fresh:
            with open(path, newline="") as fh:
                header = next(csv.reader(fh), [])
            if header != columns[: len(header)] or len(header) > len(columns):
                raise ValueError(f"{path} has columns {header}, expected a prefix of {columns}")
            columns = header
        with open(path, "a", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if fresh:
                writer.writerow(columns)
            for row in rows:
                row = {"config_hash": self.config_hash, **row}
                missing = [c for c in columns if c not in row]
                if missing:
                    raise KeyError(f"row for {table} lacks {missing}")
                writer.writerow([_cell(row[c]) for c in columns])
        return path

    def write_json(self, name: str, payload) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / f"{name}-{self.config_hash}.json"
        path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
        return path
