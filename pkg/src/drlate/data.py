"""Tabular input, variable roles and covariate expansion."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, ParseError, RoleError, TransformError


@dataclass(frozen=True)
class Roles:
    """Maps analysis roles to column names."""

    outcome: str
    treatment: str
    instrument: str
    covariates: tuple[str, ...] = ()
    cluster: str | None = None
    bound: str | None = None

    @classmethod
    def from_mapping(cls, m: Mapping) -> "Roles":
        cov = m.get("covariates", ())
        if isinstance(cov, str):
            cov = [c.strip() for c in cov.split(",") if c.strip()]
        return cls(
            outcome=m["outcome"],
            treatment=m["treatment"],
            instrument=m["instrument"],
            covariates=tuple(cov),
            cluster=m.get("cluster") or None,
            bound=m.get("bound") or None,
        )

    def columns(self) -> list[str]:
        cols = [self.outcome, self.treatment, self.instrument, *self.covariates]
        for extra in (self.cluster, self.bound):
            if extra is not None:
                cols.append(extra)
        return list(dict.fromkeys(cols))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented numeric table with assigned roles.

    Arrays are stored read-only so a Dataset can be shared across workers.
    """

    columns: dict[str, np.ndarray]
    roles: Roles

    def __post_init__(self):
        cols = {}
        n = None
        for name, values in self.columns.items():
            arr = np.array(values, dtype=float)
            if arr.ndim != 1:
                raise RoleError(f"column {name!r} is not one-dimensional")
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise RoleError(f"column {name!r} has {arr.shape[0]} rows, expected {n}")
            arr.setflags(write=False)
            cols[name] = arr
        object.__setattr__(self, "columns", cols)
        self._validate()

    def _validate(self):
        for name in self.roles.columns():
            if name not in self.columns:
                raise RoleError(f"role column {name!r} not found")
            if not np.all(np.isfinite(self.columns[name])):
                raise ParseError(f"column {name!r} contains missing or non-finite values")
        for name in (self.roles.treatment, self.roles.instrument):
            bad = ~np.isin(self.columns[name], (0.0, 1.0))
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise DomainError(
                    f"column {name!r} must be binary; row {row} has {self.columns[name][row]!r}"
                )
        if self.n_obs < 2:
            raise RoleError("need at least two observations")
        z = self.z
        if z.min() == z.max():
            raise RoleError("instrument takes a single value; both arms must be observed")

    @property
    def n_obs(self) -> int:
        return next(iter(self.columns.values())).shape[0]

    @property
    def y(self) -> np.ndarray:
        return self.columns[self.roles.outcome]

    @property
    def w(self) -> np.ndarray:
        return self.columns[self.roles.treatment]

    @property
    def z(self) -> np.ndarray:
        return self.columns[self.roles.instrument]

    @property
    def cluster(self) -> np.ndarray | None:
        if self.roles.cluster is None:
            return None
        return self.columns[self.roles.cluster]

    @property
    def bound(self) -> np.ndarray | None:
        if self.roles.bound is None:
            return None
        return self.columns[self.roles.bound]

    def take(self, idx) -> "Dataset":
        """Row subset (or resample with repetition) preserving roles."""
        idx = np.asarray(idx)
        return Dataset({k: v[idx] for k, v in self.columns.items()}, self.roles)

    def with_roles(self, **changes) -> "Dataset":
        roles = Roles(**{**self.roles.__dict__, **changes})
        return Dataset(self.columns, roles)

    def equals(self, other: "Dataset") -> bool:
        if self.roles != other.roles or list(self.columns) != list(other.columns):
            return False
        return all(np.array_equal(self.columns[k], other.columns[k]) for k in self.columns)


def _parse_float(text: str, column: str, row: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"column {column!r}, row {row}: cannot parse {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"column {column!r}, row {row}: non-finite value {text!r}")
    return value


def load_dataset(path, roles: Roles | Mapping) -> Dataset:
    """Read a comma-separated file with a header row.

    Role columns must parse as finite numbers. Other columns are kept when
    they are fully numeric and silently dropped otherwise.
    """
    if not isinstance(roles, Roles):
        roles = Roles.from_mapping(roles)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    missing = [c for c in roles.columns() if c not in header]
    if missing:
        raise RoleError(f"role columns not in header: {missing}")
    required = set(roles.columns())
    columns: dict[str, np.ndarray] = {}
    for j, name in enumerate(header):
        if name in columns:
            raise ParseError(f"duplicate column {name!r}")
        raw = [r[j] if j < len(r) else "" for r in rows]
        if name in required:
            columns[name] = np.array([_parse_float(t, name, i + 1) for i, t in enumerate(raw)])
        else:
            try:
                vals = np.array([float(t) for t in raw])
            except ValueError:
                continue
            columns[name] = vals
    return Dataset(columns, roles)


def save_dataset(d: Dataset, path) -> None:
    """Write all columns with shortest round-trip float formatting."""
    names = list(d.columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for i in range(d.n_obs):
            writer.writerow([repr(float(d.columns[c][i])) for c in names])


@dataclass(frozen=True)
class Term:
    """One regressor: ``(column - shift) ** power``, optionally mean-centred afterwards."""

    column: str
    power: int = 1
    shift: float = 0.0
    center: bool = False

    def __post_init__(self):
        if int(self.power) != self.power or self.power < 1:
            raise TransformError(f"power must be an integer >= 1, got {self.power!r}")

    @property
    def label(self) -> str:
        base = self.column if self.shift == 0 else f"({self.column}-{self.shift:g})"
        if self.power != 1:
            base = f"{base}^{self.power}"
        return base + (":c" if self.center else "")

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        v = (x - self.shift) ** self.power
        if self.center:
            v = v - v.mean()
        return v


_TERM_RE = re.compile(
    r"^\s*(?:\(\s*(?P<pcol>[A-Za-z_][\w.]*)\s*-\s*(?P<pshift>[-+0-9.eE]+)\s*\)"
    r"|(?P<col>[A-Za-z_][\w.]*)(?:\s*-\s*(?P<shift>[-+0-9.eE]+))?)"
    r"\s*(?:\^\s*(?P<power>\d+))?\s*(?P<center>:c)?\s*$"
)


def parse_term(text: str) -> Term:
    """Parse ``age``, ``age^2``, ``(age-25)^2`` or ``income:c``."""
    m = _TERM_RE.match(text)
    if not m:
        raise TransformError(f"cannot parse covariate term {text!r}")
    col = m.group("pcol") or m.group("col")
    shift = m.group("pshift") or m.group("shift") or "0"
    return Term(col, int(m.group("power") or 1), float(shift), m.group("center") is not None)


@dataclass(frozen=True)
class CovariateTransform:
    """Ordered list of terms; an intercept column is always prepended."""

    terms: tuple[Term, ...] = field(default_factory=tuple)

    def __post_init__(self):
        terms = tuple(t if isinstance(t, Term) else parse_term(t) for t in self.terms)
        if len(set(terms)) != len(terms):
            raise TransformError("duplicate terms in covariate transform")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def parse(cls, spec: str | Sequence[str]) -> "CovariateTransform":
        if isinstance(spec, str):
            spec = [s for s in spec.split(",") if s.strip()]
        return cls(tuple(parse_term(s) for s in spec))

    @property
    def k(self) -> int:
        return 1 + len(self.terms)

    @property
    def labels(self) -> list[str]:
        return ["const"] + [t.label for t in self.terms]

    def without(self, *labels: str) -> "CovariateTransform":
        return CovariateTransform(tuple(t for t in self.terms if t.label not in labels))

    def __str__(self) -> str:
        return ",".join(t.label for t in self.terms) or "1"


def expand_covariates(d: Dataset, t: CovariateTransform) -> np.ndarray:
    """Design matrix ``[1, term_1, ..., term_k]`` with one row per observation."""
    out = np.empty((d.n_obs, t.k))
    out[:, 0] = 1.0
    for j, term in enumerate(t.terms, start=1):
        if term.column not in d.columns:
            raise TransformError(f"unknown column {term.column!r} in covariate transform")
        out[:, j] = term.evaluate(d.columns[term.column])
    return out
