"""Real-time replay of trained policies and comparison against the baselines."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baselines import DualDecompConfig, deterministic_opf, dual_decomposition, no_control
from .errors import ArchitectureMismatch, ContractError, InfeasibleError
from .feeder import losses, predict_voltages
from .policy import forward_inverter, forward_utility

BYTES_PER_SCALAR = 8
METHODS = ("dnn_policy", "optimal_policy", "deterministic_opf", "no_control")
REPORT_COLUMNS = ("timestep", "method", "loss", "vmax", "vmin", "violations", "violation_energy", "comm_bytes")


@dataclass
class TimestepRecord:
    timestep: int
    method: str
    loss: float
    vmax: float
    vmin: float
    violations: int
    violation_energy: float
    comm_bytes: int
    voltages: list = field(default_factory=list, repr=False)


@dataclass
class EvalReport:
    method: str
    records: list
    v_lo: list
    v_hi: list
    metadata: dict = field(default_factory=dict)

    @property
    def timesteps(self):
        return [r.timestep for r in self.records]

    def aggregates(self):
        loss = np.array([r.loss for r in self.records])
        V = np.array([r.voltages for r in self.records])
        g_avg = np.concatenate([V.mean(axis=0) - self.v_hi, np.asarray(self.v_lo) - V.mean(axis=0)])
        return {
            "avg_loss": float(loss.mean()),
            "total_violations": int(sum(r.violations for r in self.records)),
            "violating_timesteps": int(sum(r.violations > 0 for r in self.records)),
            "violation_energy": float(sum(r.violation_energy for r in self.records)),
            "avg_constraint_residual": float(max(0.0, g_avg.max())),
            "comm_bytes": int(sum(r.comm_bytes for r in self.records)),
        }

    def to_json(self, path):
        doc = {
            "method": self.method,
            "v_lo": list(self.v_lo),
            "v_hi": list(self.v_hi),
            "metadata": self.metadata,
            "aggregates": self.aggregates(),
            "records": [asdict(r) for r in self.records],
        }
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path):
        doc = json.loads(Path(path).read_text())
        recs = [TimestepRecord(**r) for r in doc["records"]]
        return cls(doc["method"], recs, doc["v_lo"], doc["v_hi"], doc.get("metadata", {}))

    def csv_rows(self):
        for r in self.records:
            yield [r.timestep, r.method, repr(r.loss), repr(r.vmax), repr(r.vmin), r.violations, repr(r.violation_energy), r.comm_bytes]


def write_reports_csv(reports, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            w.writerows(rep.csv_rows())


def _record(t, method, model, z, q, comm_bytes):
    sens = model.sens
    lim = model.limits
    v = predict_voltages(sens, z, q, model.v0)
    excess = np.maximum(v - lim.v_hi, 0.0) + np.maximum(lim.v_lo - v, 0.0)
    return TimestepRecord(
        int(t),
        method,
        losses(model.context(z), sens, q),
        float(v.max()),
        float(v.min()),
        int(np.count_nonzero(excess > 0)),
        float(excess.sum()),
        int(comm_bytes),
        [float(x) for x in v],
    )


def _timestep(i, s):
    return s.timestamp if s.timestamp is not None else i


def report_from_setpoints(method, setpoints, scenarios, model, comm_bytes, metadata=None):
    """Score precomputed setpoints; ``z`` of each scenario is used only for the metrics."""
    recs = [
        _record(_timestep(i, s), method, model, s.z, np.asarray(q, dtype=float), comm_bytes)
        for i, (s, q) in enumerate(zip(scenarios, setpoints))
    ]
    return EvalReport(method, recs, model.limits.v_lo.tolist(), model.limits.v_hi.tolist(), metadata or {})


def _realtime_setpoints(params, w_u, w_local):
    # utility side: telemetry in, broadcast signal out
    u = forward_utility(params, w_u)
    arch = params.arch
    q = np.zeros(arch.n_buses)
    # inverter side: each unit sees only u and its own readings
    for m, bus in enumerate(arch.inverter_buses):
        q[bus - 1] = forward_inverter(params, bus, u, w_local[m], arch.qbar[m])
    return u, q


def simulate_realtime(params, test_scenarios, model):
    """Replay the real-time loop: compute ``u`` from ``w_u``, broadcast, run each inverter head.

    Only ``w_u`` and ``w_local`` reach the policy.  Downlink traffic per
    timestep is the broadcast signal, ``d_u`` scalars.
    """
    arch = params.arch
    if arch.n_buses != model.n or tuple(arch.inverter_buses) != model.topology.inverter_buses:
        raise ArchitectureMismatch("policy architecture does not match the feeder")
    setpoints = [_realtime_setpoints(params, s.w_u, s.w_local)[1] for s in test_scenarios]
    comm = arch.d_u * BYTES_PER_SCALAR
    return report_from_setpoints("dnn_policy", setpoints, test_scenarios, model, comm, {"d_u": arch.d_u})


def baseline_reports(test_scenarios, model, dd_cfg=None):
    """Reports for the optimal policy, per-timestep OPF and no control.

    Centralized methods send one setpoint per inverter each timestep.
    """
    n_inv = len(model.topology.inverter_buses)
    state = dual_decomposition(test_scenarios, model, dd_cfg or DualDecompConfig())
    opt = report_from_setpoints(
        "optimal_policy",
        state.setpoints,
        test_scenarios,
        model,
        n_inv * BYTES_PER_SCALAR,
        {"iterations": state.iterations, "final_residual": float(state.residual_history[-1]), "dual_max": float(state.dual.max())},
    )
    opf_q, infeasible, iters = [], [], []
    for i, s in enumerate(test_scenarios):
        try:
            res = deterministic_opf(s.z, model)
            opf_q.append(res.q)
            iters.append(res.iterations)
        except InfeasibleError as exc:
            opf_q.append(exc.q)
            infeasible.append(_timestep(i, s))
    opf = report_from_setpoints(
        "deterministic_opf",
        opf_q,
        test_scenarios,
        model,
        n_inv * BYTES_PER_SCALAR,
        {"infeasible_timesteps": infeasible, "max_iterations": max(iters, default=0)},
    )
    none = report_from_setpoints("no_control", [no_control(s.z) for s in test_scenarios], test_scenarios, model, 0)
    return [opt, opf, none]


# --------------------------------------------------------------------------
# comparison


COMPARE_COLUMNS = (
    "method",
    "avg_loss",
    "total_violations",
    "violating_timesteps",
    "violation_energy",
    "avg_constraint_residual",
    "comm_bytes",
    "loss_gap_vs_optimal",
)


@dataclass
class ComparisonTable:
    rows: list

    def row(self, method):
        for r in self.rows:
            if r["method"] == method:
                return r
        raise KeyError(method)

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COMPARE_COLUMNS)
            for r in self.rows:
                w.writerow([r[c] if isinstance(r[c], (str, int)) else repr(r[c]) for c in COMPARE_COLUMNS])

    @classmethod
    def from_csv(cls, path):
        ints = {"total_violations", "violating_timesteps", "comm_bytes"}
        rows = []
        with Path(path).open(newline="") as fh:
            for raw in csv.DictReader(fh):
                rows.append(
                    {k: (v if k == "method" else int(v) if k in ints else float(v)) for k, v in raw.items()}
                )
        return cls(rows)


def loss_gap(loss, reference):
    """Relative gap, or the absolute gap when the reference is ~0."""
    if abs(reference) > 1e-12:
        return (loss - reference) / abs(reference)
    return loss - reference


def compare(reports, reference="optimal_policy"):
    """Side-by-side aggregates with loss gaps against ``reference`` (first report if absent)."""
    if not reports:
        raise ContractError("nothing to compare")
    ts = reports[0].timesteps
    for r in reports[1:]:
        if r.timesteps != ts:
            raise ContractError(f"report {r.method!r} covers different timesteps than {reports[0].method!r}")
    ref = next((r for r in reports if r.method == reference), reports[0])
    ref_loss = ref.aggregates()["avg_loss"]
    rows = []
    for r in reports:
        agg = r.aggregates()
        rows.append({"method": r.method, **agg, "loss_gap_vs_optimal": loss_gap(agg["avg_loss"], ref_loss)})
    return ComparisonTable(rows)
