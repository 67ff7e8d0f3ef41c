"""Two-tier reactive-power policy: a utility sub-network and per-inverter sub-networks.

The utility sub-network maps telemetry ``w_u`` to a short control signal
``u`` that is broadcast to every inverter.  Inverter ``n`` feeds
``[u ; w_local_n]`` through its own sub-network whose tanh output is scaled
by ``qbar_n``, so every setpoint lies strictly inside ``(-qbar_n, qbar_n)``.

Parameter vector layout (also the model-file layout): utility layers first,
then inverter sub-networks in ascending bus order.  Within each layer the
weight matrix is stored row-major (``out x in``) followed by the bias.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import _kernels
from ._kernels._fallback import _net_forward
from .errors import ArchitectureMismatch, ContractError

MODEL_FORMAT = "varnet-policy"
MODEL_VERSION = 1
INIT_RANGE = 0.1
ACTIVATIONS = ("identity", "tanh")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ContractError("layer dimensions must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class Architecture:
    """Shape of the two-tier network.

    ``utility_dims = (3, 1)`` is a single affine+tanh layer from three
    telemetry readings to a scalar ``u``.  ``inverter_dims[0]`` must equal
    ``d_u + local_dim``; the last entry is always 1.
    """

    n_buses: int
    inverter_buses: tuple
    inverter_qbar: tuple
    utility_dims: tuple = (3, 1)
    inverter_dims: tuple = (5, 6, 1)
    hidden_activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "inverter_buses", tuple(int(b) for b in self.inverter_buses))
        object.__setattr__(self, "inverter_qbar", tuple(float(q) for q in self.inverter_qbar))
        object.__setattr__(self, "utility_dims", tuple(int(d) for d in self.utility_dims))
        object.__setattr__(self, "inverter_dims", tuple(int(d) for d in self.inverter_dims))
        if len(self.inverter_buses) != len(self.inverter_qbar):
            raise ContractError("one qbar per inverter bus is required")
        if list(self.inverter_buses) != sorted(set(self.inverter_buses)):
            raise ContractError("inverter buses must be unique and ascending")
        if any(not 1 <= b <= self.n_buses for b in self.inverter_buses):
            raise ContractError("inverter bus outside 1..n_buses")
        if len(self.utility_dims) < 2 or len(self.inverter_dims) < 2:
            raise ContractError("each sub-network needs at least one layer")
        if self.inverter_dims[-1] != 1:
            raise ContractError("inverter sub-network must output a scalar")
        if self.inverter_dims[0] <= self.d_u:
            raise ContractError("inverter input must hold u plus at least one local reading")
        if self.hidden_activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.hidden_activation!r}")
        # touch to validate dims
        self.layers

    @classmethod
    def for_feeder(cls, topology, n_telemetry=3, d_u=1, utility_hidden=(), inverter_hidden=(6,), local_dim=4):
        return cls(
            topology.n_buses,
            topology.inverter_buses,
            tuple(topology.inverters.values()),
            (n_telemetry, *utility_hidden, d_u),
            (d_u + local_dim, *inverter_hidden, 1),
        )

    @property
    def d_u(self):
        return self.utility_dims[-1]

    @property
    def local_dim(self):
        return self.inverter_dims[0] - self.d_u

    @property
    def n_inverters(self):
        return len(self.inverter_buses)

    def _stack(self, dims):
        n = len(dims) - 1
        return [
            LayerSpec(dims[i], dims[i + 1], "tanh" if i == n - 1 else self.hidden_activation)
            for i in range(n)
        ]

    @cached_property
    def layers(self):
        """``(utility_layers, inverter_layers)`` as lists of LayerSpec."""
        return self._stack(self.utility_dims), self._stack(self.inverter_dims)

    @cached_property
    def layout(self):
        """Kernel layer table; see ``_kernels._fallback``."""
        util, inv = self.layers
        rows = []
        off = 0
        for spec in util + inv * self.n_inverters:
            rows.append((spec.in_dim, spec.out_dim, int(spec.activation == "tanh"), off, off + spec.in_dim * spec.out_dim))
            off += spec.in_dim * spec.out_dim + spec.out_dim
        return np.ascontiguousarray(np.array(rows, dtype=np.int64).reshape(-1, 5))

    @property
    def n_util_layers(self):
        return len(self.utility_dims) - 1

    @property
    def n_inv_layers(self):
        return len(self.inverter_dims) - 1

    @cached_property
    def n_params(self):
        lay = self.layout
        return int(lay[-1, 4] + lay[-1, 1])

    @cached_property
    def qbar(self):
        return np.array(self.inverter_qbar, dtype=float)

    @cached_property
    def inverter_index(self):
        """Zero-based positions of the inverter buses inside an N-vector."""
        return np.array([b - 1 for b in self.inverter_buses], dtype=np.intp)

    def to_dict(self):
        return {
            "n_buses": self.n_buses,
            "inverter_buses": list(self.inverter_buses),
            "inverter_qbar": list(self.inverter_qbar),
            "utility_dims": list(self.utility_dims),
            "inverter_dims": list(self.inverter_dims),
            "hidden_activation": self.hidden_activation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PolicyParams:
    arch: Architecture
    theta: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=float)
        if self.theta.shape != (self.arch.n_params,):
            raise ArchitectureMismatch(
                f"parameter vector has {self.theta.size} entries, architecture needs {self.arch.n_params}"
            )

    def _unpack(self, rows):
        return [
            (
                self.theta[wo : wo + nin * nout].reshape(nout, nin),
                self.theta[bo : bo + nout],
            )
            for nin, nout, _, wo, bo in rows
        ]

    @property
    def utility_layers(self):
        """List of ``(W, b)`` views into ``theta``."""
        return self._unpack(self.arch.layout[: self.arch.n_util_layers].tolist())

    def inverter_layers(self, bus):
        m = self._inverter_position(bus)
        start = self.arch.n_util_layers + m * self.arch.n_inv_layers
        return self._unpack(self.arch.layout[start : start + self.arch.n_inv_layers].tolist())

    def _inverter_position(self, bus):
        try:
            return self.arch.inverter_buses.index(bus)
        except ValueError:
            raise ContractError(f"no inverter sub-network for bus {bus}") from None

    def flatten(self):
        return self.theta.copy()

    @classmethod
    def from_layers(cls, arch, utility_layers, inverter_layers):
        """Inverse of ``flatten``: ``inverter_layers`` lists one layer list per inverter."""
        parts = []
        for W, b in list(utility_layers) + [lay for net in inverter_layers for lay in net]:
            parts.append(np.asarray(W, dtype=float).ravel())
            parts.append(np.asarray(b, dtype=float).ravel())
        return cls(arch, np.concatenate(parts))

    def copy(self):
        return PolicyParams(self.arch, self.theta.copy(), dict(self.metadata))


def init_params(arch, seed=0):
    """All weights and biases i.i.d. uniform on ``[-0.1, 0.1]``."""
    rng = np.random.default_rng(seed)
    return PolicyParams(arch, rng.uniform(-INIT_RANGE, INIT_RANGE, size=arch.n_params))


def _check_w(params, w_u, w_local=None):
    arch = params.arch
    w_u = np.ascontiguousarray(w_u, dtype=float)
    if w_u.shape != (arch.utility_dims[0],):
        raise ContractError(f"w_u has shape {w_u.shape}, expected ({arch.utility_dims[0]},)")
    if w_local is None:
        return w_u, None
    w_local = np.ascontiguousarray(w_local, dtype=float)
    if w_local.shape != (arch.n_inverters, arch.local_dim):
        raise ContractError(f"w_local has shape {w_local.shape}, expected ({arch.n_inverters}, {arch.local_dim})")
    return w_u, w_local


def forward_utility(params, w_u):
    """Control signal ``u`` broadcast to all inverters."""
    w_u, _ = _check_w(params, w_u)
    rows = params.arch.layout[: params.arch.n_util_layers].tolist()
    return _net_forward(params.theta, rows, w_u)[-1]


def forward_inverter(params, bus, u, w_local_n, qbar_n):
    """Setpoint of the inverter at ``bus`` from the broadcast ``u`` and its local readings."""
    arch = params.arch
    m = params._inverter_position(bus)
    x = np.concatenate([np.asarray(u, dtype=float).ravel(), np.asarray(w_local_n, dtype=float).ravel()])
    if x.shape != (arch.inverter_dims[0],):
        raise ContractError(f"inverter input has {x.size} entries, expected {arch.inverter_dims[0]}")
    start = arch.n_util_layers + m * arch.n_inv_layers
    rows = arch.layout[start : start + arch.n_inv_layers].tolist()
    return float(qbar_n * _net_forward(params.theta, rows, x)[-1][0])


def forward(params, w_u, w_local):
    """Full N-vector of setpoints; zero at buses without an inverter."""
    arch = params.arch
    w_u, w_local = _check_w(params, w_u, w_local)
    u = forward_utility(params, w_u)
    q = np.zeros(arch.n_buses)
    for m, bus in enumerate(arch.inverter_buses):
        q[bus - 1] = forward_inverter(params, bus, u, w_local[m], arch.qbar[m])
    return q


def inverter_setpoints(params, w_u, w_local):
    """Setpoints of the inverters only (kernel path, used in training)."""
    arch = params.arch
    return _kernels.forward(
        params.theta, arch.layout, arch.n_util_layers, arch.n_inv_layers, w_u, w_local, arch.qbar
    )[1]


def vjp(params, w_u, w_local, cot):
    """``(q_inv, J^T cot)`` for a cotangent over the inverter setpoints."""
    arch = params.arch
    return _kernels.vjp(
        params.theta,
        arch.layout,
        arch.n_util_layers,
        arch.n_inv_layers,
        w_u,
        w_local,
        arch.qbar,
        np.ascontiguousarray(cot, dtype=float),
    )


def jacobian(params, w_u, w_local):
    """Exact ``d pi / d theta`` as an ``N x n_params`` matrix.

    Rows of buses without an inverter are zero.  Utility columns collect the
    contribution of every inverter head through the shared ``u``.
    """
    arch = params.arch
    w_u, w_local = _check_w(params, w_u, w_local)
    J = np.zeros((arch.n_buses, arch.n_params))
    for m, bus in enumerate(arch.inverter_buses):
        e = np.zeros(arch.n_inverters)
        e[m] = 1.0
        J[bus - 1] = vjp(params, w_u, w_local, e)[1]
    return J


# --------------------------------------------------------------------------
# model files


def serialize_params(params, path, metadata=None):
    """Write a versioned JSON model file; floats are stored with ``repr`` precision."""
    meta = dict(params.metadata)
    if metadata:
        meta.update(metadata)
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "architecture": params.arch.to_dict(),
        "theta": [float(t) for t in params.theta],
        "metadata": meta,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def deserialize_params(path, expected_arch=None):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MODEL_FORMAT:
        raise ArchitectureMismatch(f"{path}: not a {MODEL_FORMAT} file")
    if doc.get("version") != MODEL_VERSION:
        raise ArchitectureMismatch(f"{path}: model version {doc.get('version')}, expected {MODEL_VERSION}")
    arch = Architecture.from_dict(doc["architecture"])
    if expected_arch is not None and arch != expected_arch:
        diffs = [
            k for k, v in expected_arch.to_dict().items() if arch.to_dict().get(k) != v
        ]
        raise ArchitectureMismatch(f"{path}: architecture mismatch in {', '.join(diffs)}")
    return PolicyParams(arch, np.array(doc["theta"], dtype=float), doc.get("metadata", {}))
