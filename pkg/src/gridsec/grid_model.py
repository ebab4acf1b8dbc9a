"""Network case loading and topology-derived matrices."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import CaseError, IslandedNetworkError


@dataclass(frozen=True)
class Bus:
    id: int
    is_reference: bool
    base_load_p: float
    base_load_q: float


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    b: float
    f_limit: float


@dataclass(frozen=True)
class GridCase:
    """Validated network description. All quantities are per-unit."""

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 100.0
    name: str = ""

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def ref(self) -> int:
        """Position of the reference bus."""
        return next(i for i, bus in enumerate(self.buses) if bus.is_reference)

    @cached_property
    def nonref(self) -> np.ndarray:
        return np.array([i for i in range(self.n_bus) if i != self.ref])

    @cached_property
    def bus_ids(self) -> np.ndarray:
        return np.array([bus.id for bus in self.buses])

    @cached_property
    def branch_ids(self) -> np.ndarray:
        return np.array([br.id for br in self.branches])

    @cached_property
    def from_idx(self) -> np.ndarray:
        pos = {bus.id: i for i, bus in enumerate(self.buses)}
        return np.array([pos[br.from_bus] for br in self.branches])

    @cached_property
    def to_idx(self) -> np.ndarray:
        pos = {bus.id: i for i, bus in enumerate(self.buses)}
        return np.array([pos[br.to_bus] for br in self.branches])

    @cached_property
    def b(self) -> np.ndarray:
        return np.array([br.b for br in self.branches])

    @cached_property
    def f_limit(self) -> np.ndarray:
        return np.array([br.f_limit for br in self.branches])

    @cached_property
    def p_load(self) -> np.ndarray:
        return np.array([bus.base_load_p for bus in self.buses])

    @cached_property
    def q_load(self) -> np.ndarray:
        return np.array([bus.base_load_q for bus in self.buses])

    def with_limits(self, f_limit) -> "GridCase":
        f_limit = np.asarray(f_limit, dtype=float)
        branches = tuple(
            Branch(br.id, br.from_bus, br.to_bus, br.b, float(lim))
            for br, lim in zip(self.branches, f_limit)
        )
        return validate_case(GridCase(self.buses, branches, self.base_mva, self.name))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "buses": [
                {"id": b.id, "is_reference": b.is_reference,
                 "p_load": b.base_load_p, "q_load": b.base_load_q}
                for b in self.buses
            ],
            "branches": [
                {"id": br.id, "from": br.from_bus, "to": br.to_bus,
                 "b": br.b, "f_limit": br.f_limit}
                for br in self.branches
            ],
        }


@dataclass(frozen=True)
class MatrixBundle:
    """Dense matrices derived from a case.

    ``M`` is the n x L incidence matrix (+1 at the from bus, -1 at the to
    bus), ``Y`` the L x L diagonal branch susceptance matrix, ``B = M Y M^T``
    the nodal susceptance matrix and ``H_dc`` the columns of ``B`` for the
    non-reference buses.
    """

    B: np.ndarray
    B_red: np.ndarray
    M: np.ndarray
    Y: np.ndarray
    H_dc: np.ndarray
    ref: int
    nonref: np.ndarray

    @property
    def n_bus(self) -> int:
        return self.B.shape[0]

    @property
    def n_branch(self) -> int:
        return self.Y.shape[0]


def _graph_components(n_bus, from_idx, to_idx):
    adj = csr_matrix((np.ones(len(from_idx)), (from_idx, to_idx)), shape=(n_bus, n_bus))
    return connected_components(adj, directed=False)


def validate_case(case: GridCase) -> GridCase:
    refs = [bus.id for bus in case.buses if bus.is_reference]
    if len(refs) == 0:
        raise CaseError("no reference bus")
    if len(refs) > 1:
        raise CaseError("multiple reference buses", refs[1])

    ids = [bus.id for bus in case.buses]
    seen = set()
    for bid in ids:
        if bid in seen:
            raise CaseError("duplicate bus id", bid)
        seen.add(bid)
    branch_ids = set()
    for br in case.branches:
        if br.id in branch_ids:
            raise CaseError("duplicate branch id", br.id)
        branch_ids.add(br.id)
        if br.from_bus not in seen or br.to_bus not in seen:
            raise CaseError("branch references unknown bus", br.id)
        if br.from_bus == br.to_bus:
            raise CaseError("branch endpoints must be distinct", br.id)
        if not np.isfinite(br.b) or br.b <= 0:
            raise CaseError("branch susceptance must be positive", br.id)
        if not br.f_limit > 0:
            raise CaseError("branch flow limit must be positive", br.id)
    if not case.base_mva > 0:
        raise CaseError("base_mva must be positive")

    n_comp, labels = _graph_components(case.n_bus, case.from_idx, case.to_idx)
    if n_comp != 1:
        stray = int(np.flatnonzero(labels != labels[case.ref])[0])
        raise CaseError("network is disconnected", case.buses[stray].id)
    return case


def case_from_dict(doc: dict) -> GridCase:
    try:
        buses = tuple(
            Bus(int(b["id"]), bool(b["is_reference"]), float(b["p_load"]), float(b["q_load"]))
            for b in doc["buses"]
        )
        branches = tuple(
            Branch(int(br["id"]), int(br["from"]), int(br["to"]), float(br["b"]), float(br["f_limit"]))
            for br in doc["branches"]
        )
        base = float(doc.get("base_mva", 100.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseError(f"malformed case document: {exc!r}") from exc
    return validate_case(GridCase(buses, branches, base, str(doc.get("name", ""))))


def load_case(path) -> GridCase:
    """Read and validate a JSON case file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CaseError(f"cannot parse {path}: {exc}") from exc
    return case_from_dict(doc)


def bundled_case(name: str = "ieee14") -> GridCase:
    """Load one of the fixtures shipped with the package (``ieee14``, ``toy3``)."""
    text = resources.files("gridsec.data").joinpath(f"{name}.json").read_text()
    return case_from_dict(json.loads(text))


def build_matrices(case: GridCase) -> MatrixBundle:
    n, L = case.n_bus, case.n_branch
    M = np.zeros((n, L))
    M[case.from_idx, np.arange(L)] = 1.0
    M[case.to_idx, np.arange(L)] = -1.0
    Y = np.diag(case.b)
    B = M @ Y @ M.T
    nonref = case.nonref
    B_red = B[np.ix_(nonref, nonref)]
    cond = np.linalg.cond(B_red)
    if not np.isfinite(cond) or cond > 1e12:
        raise IslandedNetworkError(f"reduced susceptance matrix is singular (cond={cond:.3e})")
    H_dc = B[:, nonref]
    for arr in (B, B_red, M, Y, H_dc):
        arr.setflags(write=False)
    return MatrixBundle(B=B, B_red=B_red, M=M, Y=Y, H_dc=H_dc, ref=case.ref, nonref=nonref)


def is_connected(n_bus: int, from_idx, to_idx) -> bool:
    n_comp, _ = _graph_components(n_bus, np.asarray(from_idx, dtype=int), np.asarray(to_idx, dtype=int))
    return n_comp == 1
