"""Radial feeder model and the linearized (LinDistFlow) grid equations.

Bus 0 is the substation; buses ``1..N`` are indexed ``0..N-1`` in every
N-vector used below.  Reactive setpoints are always a full N-vector with
zeros at buses that carry no inverter.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ContractError, IngestionError, TopologyError

DEFAULT_V0 = 1.0
DEFAULT_V_LO = 0.97
DEFAULT_V_HI = 1.03


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r_pu: float
    x_pu: float


@dataclass(frozen=True)
class FeederTopology:
    """Single-phase radial feeder.

    Parameters
    ----------
    n_buses : int
        Number of buses excluding the substation.
    lines : tuple of Line
        Exactly ``n_buses`` lines forming a tree rooted at bus 0.  Line
        orientation in the input does not matter.
    inverters : dict
        Maps bus id to its reactive capability ``qbar`` (pu).
    solar_buses : tuple of int
        Buses that may carry solar generation.
    v0 : float
        Substation voltage (pu).
    """

    n_buses: int
    lines: tuple
    inverters: dict = field(default_factory=dict)
    solar_buses: tuple = ()
    v0: float = DEFAULT_V0

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "solar_buses", tuple(sorted(int(b) for b in self.solar_buses)))
        object.__setattr__(
            self, "inverters", {int(b): float(q) for b, q in sorted(self.inverters.items())}
        )
        n = self.n_buses
        if n < 1:
            raise TopologyError("feeder needs at least one non-substation bus")
        for ln in self.lines:
            if not (ln.r_pu > 0 and ln.x_pu > 0):
                raise TopologyError(f"line {ln.from_bus}->{ln.to_bus} must have r_pu > 0 and x_pu > 0")
            for b in (ln.from_bus, ln.to_bus):
                if not 0 <= b <= n:
                    raise TopologyError(f"line {ln.from_bus}->{ln.to_bus} references unknown bus {b}")
        for b, q in self.inverters.items():
            if not 1 <= b <= n:
                raise TopologyError(f"inverter bus {b} is not in 1..{n}")
            if not q > 0:
                raise TopologyError(f"inverter at bus {b} needs qbar > 0, got {q}")
        for b in self.solar_buses:
            if not 1 <= b <= n:
                raise TopologyError(f"solar bus {b} is not in 1..{n}")
        # walk the tree once; raises on cycles and islands
        self._tree

    @cached_property
    def _tree(self):
        n = self.n_buses
        adj = {b: [] for b in range(n + 1)}
        for i, ln in enumerate(self.lines):
            adj[ln.from_bus].append((ln.to_bus, i))
            adj[ln.to_bus].append((ln.from_bus, i))
        parent = [-1] * (n + 1)
        feeding_line = [-1] * (n + 1)
        seen = [False] * (n + 1)
        seen[0] = True
        order = []
        queue = deque([0])
        while queue:
            b = queue.popleft()
            order.append(b)
            for nb, li in adj[b]:
                if li == feeding_line[b]:
                    continue
                if seen[nb]:
                    ln = self.lines[li]
                    raise TopologyError(
                        f"line {ln.from_bus}->{ln.to_bus} closes a cycle at bus {nb}"
                    )
                seen[nb] = True
                parent[nb] = b
                feeding_line[nb] = li
                queue.append(nb)
        missing = [b for b in range(n + 1) if not seen[b]]
        if missing:
            raise TopologyError(f"bus {missing[0]} is not reachable from the substation")
        if len(self.lines) != n:
            raise TopologyError(f"a tree on {n + 1} buses has {n} lines, got {len(self.lines)}")
        return parent, feeding_line, order

    @property
    def parent(self):
        """Parent bus of every bus (``parent[0] == -1``)."""
        return self._tree[0]

    @cached_property
    def path_matrix(self):
        """``A[j-1, n-1] = 1`` when the line feeding bus ``j`` lies on the path to bus ``n``."""
        n = self.n_buses
        parent = self.parent
        a = np.zeros((n, n))
        for bus in range(1, n + 1):
            j = bus
            while j != 0:
                a[j - 1, bus - 1] = 1.0
                j = parent[j]
        return a

    @cached_property
    def branch_r(self):
        """Resistance of the line feeding each bus 1..N."""
        fl = self._tree[1]
        return np.array([self.lines[fl[b]].r_pu for b in range(1, self.n_buses + 1)])

    @cached_property
    def branch_x(self):
        fl = self._tree[1]
        return np.array([self.lines[fl[b]].x_pu for b in range(1, self.n_buses + 1)])

    def subtree(self, bus):
        """Boolean N-mask of ``bus`` and all buses downstream of it."""
        if not 1 <= bus <= self.n_buses:
            raise ContractError(f"bus {bus} is not in the feeder tree")
        return self.path_matrix[bus - 1] > 0

    @property
    def inverter_buses(self):
        return tuple(self.inverters)

    @cached_property
    def qbar(self):
        """Capability N-vector, zero at buses without an inverter."""
        q = np.zeros(self.n_buses)
        for b, v in self.inverters.items():
            q[b - 1] = v
        return q

    @cached_property
    def solar_mask(self):
        m = np.zeros(self.n_buses, dtype=bool)
        m[[b - 1 for b in self.solar_buses]] = True
        return m


@dataclass(frozen=True)
class SensitivityMatrices:
    R: np.ndarray
    X: np.ndarray

    @property
    def n(self):
        return self.R.shape[0]


@dataclass(frozen=True)
class GridConditions:
    """Loads and solar generation at buses 1..N (pu)."""

    p_load: np.ndarray
    q_load: np.ndarray
    p_solar: np.ndarray

    def __post_init__(self):
        for name in ("p_load", "q_load", "p_solar"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.p_load.shape == self.q_load.shape == self.p_solar.shape) or self.p_load.ndim != 1:
            raise ContractError("p_load, q_load and p_solar must be N-vectors of equal length")
        for name in ("p_load", "q_load", "p_solar"):
            if np.any(getattr(self, name) < 0):
                raise ContractError(f"{name} must be nonnegative")

    @property
    def n(self):
        return self.p_load.shape[0]

    @property
    def stacked(self):
        return np.concatenate([self.p_load, self.q_load, self.p_solar])

    @classmethod
    def from_stacked(cls, z):
        z = np.asarray(z, dtype=float)
        if z.ndim != 1 or z.shape[0] % 3:
            raise ContractError("stacked grid conditions must have length 3N")
        n = z.shape[0] // 3
        return cls(z[:n], z[n : 2 * n], z[2 * n :])

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))


@dataclass(frozen=True)
class VoltageLimits:
    v_lo: np.ndarray
    v_hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v_lo", np.asarray(self.v_lo, dtype=float))
        object.__setattr__(self, "v_hi", np.asarray(self.v_hi, dtype=float))
        if self.v_lo.shape != self.v_hi.shape:
            raise ContractError("v_lo and v_hi must have equal shape")
        if not np.all(self.v_lo < self.v_hi):
            raise ContractError("voltage limits need v_lo < v_hi at every bus")

    @classmethod
    def uniform(cls, n, lo=DEFAULT_V_LO, hi=DEFAULT_V_HI):
        return cls(np.full(n, lo), np.full(n, hi))


@dataclass(frozen=True)
class ConstraintContext:
    """Scenario-dependent terms ``y`` (voltage at zero setpoints) and ``b`` of the loss."""

    y: np.ndarray
    b: np.ndarray

    @classmethod
    def build(cls, sens, z, v0=DEFAULT_V0):
        _check_dim(sens, z.p_load, "grid conditions")
        y = sens.R @ (z.p_solar - z.p_load) - sens.X @ z.q_load + v0
        b = 2.0 * (sens.R @ z.q_load)
        return cls(y, b)


@dataclass(frozen=True)
class FeederModel:
    """Topology plus voltage limits, with the sensitivities built once."""

    topology: FeederTopology
    limits: VoltageLimits

    @classmethod
    def from_topology(cls, topology, limits=None):
        if limits is None:
            limits = VoltageLimits.uniform(topology.n_buses)
        if limits.v_lo.shape != (topology.n_buses,):
            raise ContractError("voltage limits do not match the feeder size")
        return cls(topology, limits)

    @cached_property
    def sens(self):
        return build_sensitivities(self.topology)

    @property
    def n(self):
        return self.topology.n_buses

    @property
    def v0(self):
        return self.topology.v0

    def context(self, z):
        if np.shape(z.p_solar) == (self.n,) and np.any(z.p_solar[~self.topology.solar_mask] != 0):
            raise ContractError("solar generation at a bus without solar")
        return ConstraintContext.build(self.sens, z, self.topology.v0)


def _check_dim(sens, vec, what):
    if np.shape(vec) != (sens.n,):
        raise ContractError(f"{what} has shape {np.shape(vec)}, expected ({sens.n},)")


def build_sensitivities(topology):
    """Return R, X with ``R[m, n] = 2 * sum(r)`` over the lines shared by the paths to m and n."""
    a = topology.path_matrix
    R = 2.0 * (a.T * topology.branch_r) @ a
    X = 2.0 * (a.T * topology.branch_x) @ a
    # exact symmetry; the product above can differ in the last ulp
    R = 0.5 * (R + R.T)
    X = 0.5 * (X + X.T)
    return SensitivityMatrices(R, X)


def predict_voltages(sens, z, q_inv, v0=DEFAULT_V0):
    _check_dim(sens, z.p_load, "grid conditions")
    _check_dim(sens, q_inv, "q_inv")
    return sens.R @ (z.p_solar - z.p_load) + sens.X @ (q_inv - z.q_load) + v0


def constraint_g(ctx, sens, q_inv, limits):
    """Stacked voltage constraints ``[v - v_hi; v_lo - v]``; feasible iff all entries <= 0."""
    _check_dim(sens, q_inv, "q_inv")
    _check_dim(sens, ctx.y, "ctx.y")
    _check_dim(sens, limits.v_hi, "voltage limits")
    v = sens.X @ q_inv + ctx.y
    return np.concatenate([v - limits.v_hi, limits.v_lo - v])


def losses(ctx, sens, q_inv):
    _check_dim(sens, q_inv, "q_inv")
    return float(q_inv @ sens.R @ q_inv - ctx.b @ q_inv)


def losses_gradient(ctx, sens, q_inv):
    _check_dim(sens, q_inv, "q_inv")
    return 2.0 * (sens.R @ q_inv) - ctx.b


# --------------------------------------------------------------------------
# file formats


def _read_csv(path, required):
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise IngestionError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in required if c not in header]
        if missing:
            raise IngestionError(f"{path}: missing column(s) {', '.join(missing)}")
        reader.fieldnames = header
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(row[c] is None for c in required):
                raise IngestionError(f"{path}:{lineno}: ragged row")
            rows.append((lineno, row))
        return rows


def load_feeder(feeder_csv, inverter_csv, solar_csv=None, v0=DEFAULT_V0):
    """Read a feeder from ``from,to,r_pu,x_pu`` / ``bus,qbar_pu`` / ``bus`` CSV files."""
    lines = []
    for lineno, row in _read_csv(feeder_csv, ("from", "to", "r_pu", "x_pu")):
        try:
            lines.append(Line(int(row["from"]), int(row["to"]), float(row["r_pu"]), float(row["x_pu"])))
        except ValueError as exc:
            raise IngestionError(f"{feeder_csv}:{lineno}: {exc}") from exc
    inverters = {}
    for lineno, row in _read_csv(inverter_csv, ("bus", "qbar_pu")):
        try:
            inverters[int(row["bus"])] = float(row["qbar_pu"])
        except ValueError as exc:
            raise IngestionError(f"{inverter_csv}:{lineno}: {exc}") from exc
    solar = []
    if solar_csv is not None:
        for lineno, row in _read_csv(solar_csv, ("bus",)):
            try:
                solar.append(int(row["bus"]))
            except ValueError as exc:
                raise IngestionError(f"{solar_csv}:{lineno}: {exc}") from exc
    n = max([max(ln.from_bus, ln.to_bus) for ln in lines], default=0)
    return FeederTopology(n, tuple(lines), inverters, tuple(solar), v0)


def bundled_feeder_dir():
    return resources.files("varnet") / "data" / "ieee13"


def ieee13(v0=DEFAULT_V0):
    """Bundled single-phase 13-bus feeder with solar and two inverters."""
    d = bundled_feeder_dir()
    with resources.as_file(d) as path:
        return load_feeder(path / "feeder.csv", path / "inverters.csv", path / "solar.csv", v0=v0)
