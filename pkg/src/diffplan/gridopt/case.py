"""Network case data and DC power-flow distribution factors."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

CASE_FORMAT = "diffplan-case"
CASE_VERSION = 1


class SingularNetworkError(ValueError):
    """The bus susceptance matrix is singular, e.g. the network is disconnected."""


@dataclass(frozen=True)
class NetworkCase:
    name: str
    bus_ids: tuple
    gen_names: tuple
    branch_names: tuple
    gen_bus: np.ndarray      # bus index of each generator
    cost: np.ndarray         # $/MWh
    p_max: np.ndarray        # MW
    f_max: np.ndarray        # MW
    ptdf: np.ndarray         # branch x bus
    base_demand: np.ndarray  # MW per bus
    rho_gen: np.ndarray      # $/MWh per generator
    rho_flow: np.ndarray     # $/MWh per branch
    slack_bus: int = 0
    slack_fuel: bool = False  # charge fuel cost on over-cap output as well as the penalty

    def __post_init__(self):
        if self.ptdf.shape != (self.n_branch, self.n_bus):
            raise ValueError(f"PTDF shape {self.ptdf.shape} != (branches, buses) = {(self.n_branch, self.n_bus)}")
        if np.any(self.p_max < 0) or np.any(self.f_max < 0):
            raise ValueError("capacities must be nonnegative")
        top = self.cost.max(initial=0.0)
        if np.any(self.rho_gen <= top) or np.any(self.rho_flow <= top):
            raise ValueError("violation penalties must exceed every generator cost")

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_gen(self) -> int:
        return len(self.gen_names)

    @property
    def n_branch(self) -> int:
        return len(self.branch_names)

    @property
    def gen_incidence(self) -> np.ndarray:
        """Bus x generator 0/1 matrix."""
        C = np.zeros((self.n_bus, self.n_gen))
        C[self.gen_bus, np.arange(self.n_gen)] = 1.0
        return C

    def flows(self, p, d) -> np.ndarray:
        """Branch flows for generator outputs ``p`` and nodal demand ``d`` (last axis)."""
        return (np.asarray(p) @ self.gen_incidence.T - np.asarray(d)) @ self.ptdf.T


def compute_ptdf(n_bus: int, frm, to, reactance, slack: int) -> np.ndarray:
    """PTDF with the slack bus column equal to zero."""
    frm = np.asarray(frm, dtype=int)
    to = np.asarray(to, dtype=int)
    x = np.asarray(reactance, dtype=float)
    if np.any(x <= 0):
        raise ValueError("branch reactances must be positive")
    n_branch = x.size
    A = np.zeros((n_branch, n_bus))
    A[np.arange(n_branch), frm] = 1.0
    A[np.arange(n_branch), to] = -1.0
    Bf = A / x[:, None]
    Bbus = A.T @ Bf
    keep = [i for i in range(n_bus) if i != slack]
    Bred = Bbus[np.ix_(keep, keep)]
    if n_bus > 1 and np.linalg.matrix_rank(Bred) < n_bus - 1:
        raise SingularNetworkError("network is disconnected: reduced susceptance matrix is singular")
    ptdf = np.zeros((n_branch, n_bus))
    if n_bus > 1:
        ptdf[:, keep] = Bf[:, keep] @ np.linalg.inv(Bred)
    return ptdf


def case_from_dict(doc: dict) -> NetworkCase:
    if doc.get("format", CASE_FORMAT) != CASE_FORMAT:
        raise ValueError(f"expected case format {CASE_FORMAT!r}, found {doc.get('format')!r}")
    if doc.get("version", CASE_VERSION) != CASE_VERSION:
        raise ValueError(f"expected case version {CASE_VERSION}, found {doc.get('version')!r}")
    buses = doc["buses"]
    bus_ids = tuple(b["id"] for b in buses)
    index = {b: i for i, b in enumerate(bus_ids)}
    gens = doc["generators"]
    branches = doc["branches"]
    pen = doc.get("penalties", {})
    slack = index[doc.get("slack_bus", bus_ids[0])]

    if "ptdf" in doc:
        ptdf = np.array(doc["ptdf"], dtype=float)
    else:
        ptdf = compute_ptdf(len(buses), [index[br["from"]] for br in branches],
                            [index[br["to"]] for br in branches], [br["reactance"] for br in branches], slack)
    rho_g = pen.get("generation", 10_000.0)
    rho_f = pen.get("flow", 10_000.0)
    return NetworkCase(
        name=doc.get("name", "case"),
        bus_ids=bus_ids,
        gen_names=tuple(g.get("name", f"g{i + 1}") for i, g in enumerate(gens)),
        branch_names=tuple(br.get("name", f"b{i + 1}") for i, br in enumerate(branches)),
        gen_bus=np.array([index[g["bus"]] for g in gens], dtype=int),
        cost=np.array([g["cost"] for g in gens], dtype=float),
        p_max=np.array([g["p_max"] for g in gens], dtype=float),
        f_max=np.array([br["f_max"] for br in branches], dtype=float),
        ptdf=ptdf,
        base_demand=np.array([b.get("demand", 0.0) for b in buses], dtype=float),
        rho_gen=np.full(len(gens), float(rho_g)),
        rho_flow=np.full(len(branches), float(rho_f)),
        slack_bus=slack,
        slack_fuel=bool(pen.get("slack_fuel", False)),
    )


def bundled_case_path() -> Path:
    return Path(str(resources.files("diffplan") / "data" / "case5.json"))


def load_case(source=None, *, rho_gen: float | None = None, rho_flow: float | None = None) -> NetworkCase:
    """Read a JSON case file (default: the bundled 5-bus system)."""
    path = Path(source) if source is not None else bundled_case_path()
    doc = json.loads(path.read_text())
    if rho_gen is not None or rho_flow is not None:
        doc.setdefault("penalties", {})
        if rho_gen is not None:
            doc["penalties"]["generation"] = rho_gen
        if rho_flow is not None:
            doc["penalties"]["flow"] = rho_flow
    return case_from_dict(doc)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
