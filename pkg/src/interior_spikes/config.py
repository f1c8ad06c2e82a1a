"""Run configuration: a single YAML file, validated, hashable and round-trippable."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .domain import EPSILON_MAX, MAX_MESH_WIDTH, Domain
from .ground_state import critical_exponent

# fields that only say where things go; they do not change any number produced
PLACEMENT_FIELDS = ("output_dir", "cache_dir")

DEFAULT_TOLERANCES = {
    "ground_state_tol": 1e-10,
    "ground_state_rmax": 40.0,
    "fixed_point_tol": 1e-10,
    "orthogonality_tol": 1e-9,
    "max_iterations": 60,
    "newton_tol": 1e-11,
    "multiplier_max": 1e-6,
}

DOC = {
    "domain": "shape and physical extents: {shape: interval, extents: [a, b]}, "
              "{shape: rectangle, extents: [[x0, x1], [y0, y1]]} or "
              "{shape: disk, extents: [[cx, cy], R]}",
    "p": "nonlinearity exponent, 1 < p < (n+2)/(n-2)",
    "epsilon": f"diffusion length, 0 < epsilon <= {EPSILON_MAX}",
    "h": f"mesh width in rescaled units, 0 < h <= {MAX_MESH_WIDTH}; must divide the extents",
    "rho": "minimum separation in units of epsilon",
    "eta": "decay rate of the weighted sup norm, 0 < eta < 1",
    "order": "order of the Laplacian stencil on Cartesian grids (2 or 4)",
    "delta": "packing budget: insertion stops once k+1 > delta / (rho epsilon)^n; null for none",
    "k_target": "number of spikes for a fixed configuration, or 'ladder'",
    "k_max": "upper limit on ladder length; null runs until no clearance is left",
    "points": "spike centres (physical coordinates) for reduce, energy and certify",
    "clearance_factor": "insertion needs this many rho epsilon of clearance",
    "boundary_factor": "boundary distance is multiplied by this when measuring clearance",
    "budget": "maximum reduced-energy evaluations per local maximization",
    "tolerances": "overrides for " + ", ".join(sorted(DEFAULT_TOLERANCES)),
    "output_dir": "directory receiving CSV ledgers and JSON sidecars",
    "seed": "recorded with every run; no step of the pipeline draws random numbers",
    "cache_dir": "ground-state cache; null falls back to $SPIKES_CACHE_DIR",
}


@dataclass(frozen=True)
class RunConfig:
    domain: dict
    p: float
    epsilon: float
    h: float
    rho: float = 8.0
    eta: float = 0.5
    order: int = 4
    delta: float | None = None
    k_target: int | str = "ladder"
    k_max: int | None = None
    points: list | None = None
    clearance_factor: float = 1.0
    boundary_factor: float = 2.0
    budget: int = 5000
    tolerances: dict = field(default_factory=dict)
    output_dir: str = "runs"
    seed: int = 0
    cache_dir: str | None = None

    def __post_init__(self):
        dom = self.build_domain()
        shape = {k: v for k, v in dom.to_dict().items() if k != "epsilon"}
        object.__setattr__(self, "domain", shape)
        for name in ("p", "epsilon", "h", "rho", "eta", "clearance_factor", "boundary_factor"):
            object.__setattr__(self, name, float(getattr(self, name)))
        n = dom.dim
        if not 1.0 < self.p < critical_exponent(n):
            raise ValueError(f"p={self.p} must lie in (1, {critical_exponent(n)}) for n={n}")
        if not 0.0 < self.h <= MAX_MESH_WIDTH:
            raise ValueError(f"h must lie in (0, {MAX_MESH_WIDTH}]")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie in (0, 1)")
        if self.order not in (2, 4):
            raise ValueError("order must be 2 or 4")
        if self.delta is not None and not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.k_target != "ladder" and (not isinstance(self.k_target, int) or self.k_target < 0):
            raise ValueError("k_target must be a non-negative integer or 'ladder'")
        if self.k_max is not None and self.k_max < 1:
            raise ValueError("k_max must be at least 1")
        if self.clearance_factor <= 0 or self.boundary_factor <= 0:
            raise ValueError("clearance and boundary factors must be positive")
        if self.budget < 1:
            raise ValueError("budget must be positive")
        unknown = set(self.tolerances) - set(DEFAULT_TOLERANCES)
        if unknown:
            raise ValueError(f"unknown tolerance keys: {sorted(unknown)}")
        if self.points is not None:
            pts = [[float(x) for x in (q if isinstance(q, (list, tuple)) else [q])]
                   for q in self.points]
            if any(len(q) != n for q in pts):
                raise ValueError(f"every point needs {n} coordinates")
            object.__setattr__(self, "points", pts)
            if self.k_target != "ladder" and self.k_target != len(pts):
                raise ValueError("k_target disagrees with the number of points")

    @property
    def dim(self) -> int:
        return self.build_domain().dim

    def build_domain(self) -> Domain:
        return Domain.from_dict({**self.domain, "epsilon": self.epsilon})

    def tolerance(self, name: str):
        return self.tolerances.get(name, DEFAULT_TOLERANCES[name])

    def reduce_options(self) -> dict:
        return {
            "tol_fp": self.tolerance("fixed_point_tol"),
            "tol_orth": self.tolerance("orthogonality_tol"),
            "max_iter": int(self.tolerance("max_iterations")),
        }

    # serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        dim = d.pop("dim", None)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        cfg = cls(**d)
        if dim is not None and int(dim) != cfg.dim:
            raise ValueError(f"dim={dim} disagrees with the {cfg.domain['shape']} domain")
        return cfg

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        data = yaml.safe_load(text)
        if not isinstance(data, dict):
            raise ValueError("configuration file must hold a mapping")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_yaml(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def hash(self) -> str:
        """Digest of every field that can change a computed number."""
        d = {k: v for k, v in self.to_dict().items() if k not in PLACEMENT_FIELDS}
        d["tolerances"] = {**DEFAULT_TOLERANCES, **self.tolerances}
        text = json.dumps(d, sort_keys=True, default=_plain)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _plain(x):
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    raise TypeError(f"cannot hash {type(x).__name__}")


def reference_page() -> str:
    """Markdown table of every configuration key with its default."""
    lines = ["| key | default | meaning |", "|---|---|---|"]
    for f in dataclasses.fields(RunConfig):
        if f.default is not dataclasses.MISSING:
            default = repr(f.default)
        elif f.default_factory is not dataclasses.MISSING:
            default = repr(f.default_factory())
        else:
            default = "required"
        lines.append(f"| `{f.name}` | {default} | {DOC[f.name]} |")
    lines += ["", "Tolerance defaults:", ""]
    lines += [f"- `{k}`: {v!r}" for k, v in sorted(DEFAULT_TOLERANCES.items())]
    return "\n".join(lines) + "\n"
