"""Load/solar traces, DNN input derivation and scenario augmentation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, IngestionError
from .feeder import GridConditions

NOISE_STD_LOW_SOLAR = 1e-3
NOISE_STD_HIGH_SOLAR = 1e-1
PEAK_SCALE_FACTOR = 7.5

TRACE_COLUMNS = ("timestamp", "bus", "p_load_pu", "p_solar_pu")


@dataclass
class TimeSeriesTrace:
    bus: int
    timestamps: np.ndarray
    p_load: np.ndarray
    p_solar: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.p_load = np.asarray(self.p_load, dtype=float)
        self.p_solar = np.asarray(self.p_solar, dtype=float)
        n = self.timestamps.shape[0]
        if self.p_load.shape != (n,) or self.p_solar.shape != (n,):
            raise ContractError(f"bus {self.bus}: series lengths differ")
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ContractError(f"bus {self.bus}: timestamps must be strictly increasing")
        if np.any(self.p_load < 0) or np.any(self.p_solar < 0):
            raise ContractError(f"bus {self.bus}: negative load or solar value")


def ingest_traces(path, scale_factor=1.0):
    """Read a ``timestamp,bus,p_load_pu,p_solar_pu`` CSV into per-bus traces.

    Both load and solar are multiplied by ``scale_factor``.  Every bus must
    report the same set of timestamps.
    """
    if not scale_factor > 0:
        raise ContractError(f"scale_factor must be positive, got {scale_factor}")
    path = Path(path)
    per_bus = {}
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise IngestionError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        missing = [c for c in TRACE_COLUMNS if c not in header]
        if missing:
            raise IngestionError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = [header.index(c) for c in TRACE_COLUMNS]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{lineno}: ragged row ({len(row)} fields, expected {len(header)})")
            try:
                t = int(row[idx[0]])
                bus = int(row[idx[1]])
                pl = float(row[idx[2]])
                ps = float(row[idx[3]])
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from exc
            if pl < 0 or ps < 0:
                raise IngestionError(f"{path}:{lineno}: negative value")
            per_bus.setdefault(bus, []).append((t, pl, ps))
    if not per_bus:
        raise IngestionError(f"{path}: no data rows")
    traces = []
    reference = None
    for bus in sorted(per_bus):
        rows = sorted(per_bus[bus])
        ts = np.array([r[0] for r in rows], dtype=np.int64)
        if reference is None:
            reference = (bus, ts)
        elif not np.array_equal(ts, reference[1]):
            only_here = sorted(set(ts.tolist()) - set(reference[1].tolist()))[:5]
            only_there = sorted(set(reference[1].tolist()) - set(ts.tolist()))[:5]
            raise IngestionError(
                f"{path}: timestamps of bus {bus} do not align with bus {reference[0]} "
                f"(only in {bus}: {only_here}, only in {reference[0]}: {only_there})"
            )
        try:
            traces.append(
                TimeSeriesTrace(
                    bus,
                    ts,
                    np.array([r[1] for r in rows]) * scale_factor,
                    np.array([r[2] for r in rows]) * scale_factor,
                )
            )
        except ContractError as exc:
            raise IngestionError(f"{path}: {exc}") from exc
    return traces


def write_traces(path, traces):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        ts = traces[0].timestamps
        for i, t in enumerate(ts):
            for tr in traces:
                w.writerow([int(t), tr.bus, repr(float(tr.p_load[i])), repr(float(tr.p_solar[i]))])


def synthesize_reactive_loads(p_load, pf_lo=0.9, pf_hi=1.0, seed=0):
    """Reactive loads from lagging power factors drawn from ``U[pf_lo, pf_hi]``."""
    if not 0 < pf_lo <= pf_hi <= 1:
        raise ContractError(f"need 0 < pf_lo <= pf_hi <= 1, got ({pf_lo}, {pf_hi})")
    p_load = np.asarray(p_load, dtype=float)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pf = rng.uniform(pf_lo, pf_hi, size=p_load.shape)
    return p_load * np.tan(np.arccos(pf))


# --------------------------------------------------------------------------
# DNN inputs


def derive_inputs(z, topology, telemetry_buses):
    """Utility telemetry and per-inverter local readings implied by ``z``.

    ``w_u[i]`` approximates the active flow into telemetry bus ``i`` as the
    net withdrawal (load minus solar) of its subtree.  Each inverter sees
    ``(p_solar, p_load, q_load, qbar)`` at its own bus, in ascending bus order.
    """
    if z.n != topology.n_buses:
        raise ContractError(f"grid conditions have {z.n} buses, feeder has {topology.n_buses}")
    net = z.p_load - z.p_solar
    w_u = np.array([net[topology.subtree(b)].sum() for b in telemetry_buses])
    rows = [
        (z.p_solar[b - 1], z.p_load[b - 1], z.q_load[b - 1], q)
        for b, q in topology.inverters.items()
    ]
    w_local = np.array(rows, dtype=float).reshape(len(rows), 4)
    return w_u, w_local


@dataclass(frozen=True)
class InputMap:
    topology: object
    telemetry_buses: tuple

    def __post_init__(self):
        object.__setattr__(self, "telemetry_buses", tuple(int(b) for b in self.telemetry_buses))
        for b in self.telemetry_buses:
            self.topology.subtree(b)

    def __call__(self, z):
        return derive_inputs(z, self.topology, self.telemetry_buses)


@dataclass
class Scenario:
    z: GridConditions
    w_u: np.ndarray
    w_local: np.ndarray
    origin: str = "measured"
    source_index: int = 0
    timestamp: int | None = None

    def to_dict(self):
        return {
            "z": self.z.stacked.tolist(),
            "w_u": self.w_u.tolist(),
            "w_local": self.w_local.tolist(),
            "origin": self.origin,
            "source_index": self.source_index,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            GridConditions.from_stacked(d["z"]),
            np.asarray(d["w_u"], dtype=float),
            np.asarray(d["w_local"], dtype=float).reshape(len(d["w_local"]), -1),
            d["origin"],
            int(d["source_index"]),
            d.get("timestamp"),
        )


@dataclass
class ScenarioSet:
    scenarios: list
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def __getitem__(self, i):
        return self.scenarios[i]

    def to_jsonl(self, path):
        with Path(path).open("w") as fh:
            fh.write(json.dumps({"metadata": self.metadata}, sort_keys=True) + "\n")
            for s in self.scenarios:
                fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        with Path(path).open() as fh:
            lines = [ln for ln in fh if ln.strip()]
        if not lines:
            raise IngestionError(f"{path}: empty scenario file")
        head = json.loads(lines[0])
        return cls([Scenario.from_dict(json.loads(ln)) for ln in lines[1:]], head.get("metadata", {}))


def measured_scenarios(traces, input_map, start_minute, end_minute, pf_lo=0.9, pf_hi=1.0, seed=0):
    """One scenario per trace timestamp in ``[start_minute, end_minute)``.

    Reactive loads are synthesized over the full trace with a per-bus RNG
    stream, so overlapping windows see identical values.
    """
    topo = input_map.topology
    by_bus = {tr.bus: tr for tr in traces}
    missing = [b for b in range(1, topo.n_buses + 1) if b not in by_bus]
    if missing:
        raise ContractError(f"traces lack bus(es) {missing}")
    ts = by_bus[1].timestamps
    sel = np.flatnonzero((ts >= start_minute) & (ts < end_minute))
    if sel.size == 0:
        raise ContractError(f"no trace samples in minutes [{start_minute}, {end_minute})")
    n = topo.n_buses
    p_load = np.array([by_bus[b].p_load for b in range(1, n + 1)])
    p_solar = np.array([by_bus[b].p_solar for b in range(1, n + 1)])
    p_solar[~topo.solar_mask] = 0.0
    q_load = np.array(
        [
            synthesize_reactive_loads(p_load[b - 1], pf_lo, pf_hi, np.random.default_rng([seed, b]))
            for b in range(1, n + 1)
        ]
    )
    out = []
    for i, t in enumerate(sel):
        z = GridConditions(p_load[:, t].copy(), q_load[:, t].copy(), p_solar[:, t].copy())
        w_u, w_local = input_map(z)
        out.append(Scenario(z, w_u, w_local, "measured", i, int(ts[t])))
    return out


@dataclass(frozen=True)
class AugmentConfig:
    replication_factor: int = 4
    noise_std: float = NOISE_STD_LOW_SOLAR
    seed: int = 0

    def __post_init__(self):
        if self.replication_factor < 1:
            raise ContractError("replication_factor must be >= 1")
        if self.noise_std < 0:
            raise ContractError("noise_std must be >= 0")


def augment(measured, cfg, input_map):
    """Replicate each measured scenario with Gaussian-perturbed grid conditions, then shuffle.

    Copy 0 of every parent is the unperturbed original.  Perturbed values
    are clipped at zero and solar stays zero off the solar buses.  Each
    parent draws from its own RNG stream.
    """
    if not measured:
        raise ContractError("augment needs at least one measured scenario")
    solar_mask = input_map.topology.solar_mask
    root = np.random.SeedSequence(cfg.seed)
    parent_seeds = root.spawn(len(measured) + 1)
    out = []
    for i, parent in enumerate(measured):
        rng = np.random.default_rng(parent_seeds[i])
        out.append(Scenario(parent.z, parent.w_u.copy(), parent.w_local.copy(), "measured", i, parent.timestamp))
        n = parent.z.n
        for _ in range(1, cfg.replication_factor):
            noise = rng.normal(0.0, cfg.noise_std, size=3 * n) if cfg.noise_std > 0 else np.zeros(3 * n)
            zs = np.maximum(parent.z.stacked + noise, 0.0)
            zs[2 * n :][~solar_mask] = 0.0
            z = GridConditions.from_stacked(zs)
            w_u, w_local = input_map(z)
            out.append(Scenario(z, w_u, w_local, "augmented", i, parent.timestamp))
    order = np.random.default_rng(parent_seeds[-1]).permutation(len(out))
    meta = {
        "replication_factor": cfg.replication_factor,
        "noise_std": cfg.noise_std,
        "seed": cfg.seed,
        "n_measured": len(measured),
    }
    return ScenarioSet([out[k] for k in order], meta)


# --------------------------------------------------------------------------
# synthetic traces


def _daily_load_shape(minutes):
    h = (minutes % 1440) / 60.0
    shape = (
        0.35
        + 0.25 * np.exp(-0.5 * ((h - 7.5) / 1.2) ** 2)
        + 0.15 * np.exp(-0.5 * ((h - 13.0) / 2.5) ** 2)
        + 0.65 * np.exp(-0.5 * ((h - 19.5) / 1.8) ** 2)
    )
    return shape


def _daily_solar_shape(minutes, sunrise=7.5, sunset=20.5):
    h = (minutes % 1440) / 60.0
    x = (h - sunrise) / (sunset - sunrise)
    return np.where((x > 0) & (x < 1), np.sin(np.pi * np.clip(x, 0, 1)) ** 1.5, 0.0)


def synthetic_traces(topology, days=1, seed=0, scale=1.0):
    """Minute-resolution residential load and rooftop-solar traces.

    Values are in benchmark units (before the ingestion scale factor) and
    multiplied by ``scale``.  Solar is zero between sunset and sunrise and
    peaks at 14:00; loads peak in the evening.
    """
    rng = np.random.default_rng(seed)
    minutes = np.arange(days * 1440, dtype=np.int64)
    load_shape = _daily_load_shape(minutes)
    solar_shape = _daily_solar_shape(minutes)
    traces = []
    for bus in range(1, topology.n_buses + 1):
        peak = rng.uniform(0.05, 0.08)
        # AR(1) minute-to-minute fluctuation
        eps = rng.normal(0.0, 0.015, size=minutes.size)
        ar = np.empty_like(eps)
        acc = 0.0
        for i, e in enumerate(eps):
            acc = 0.9 * acc + e
            ar[i] = acc
        p_load = np.maximum(peak * load_shape * (1.0 + ar), 0.0)
        if bus in topology.solar_buses:
            cap = rng.uniform(0.22, 0.26)
            cloud = 1.0 - 0.02 * np.abs(rng.normal(size=minutes.size))
            p_solar = cap * solar_shape * cloud
        else:
            p_solar = np.zeros(minutes.size)
        traces.append(TimeSeriesTrace(bus, minutes, p_load * scale, p_solar * scale))
    return traces


def hour_window(hour):
    return 60 * hour, 60 * (hour + 1)


def is_night(minute):
    return math.isclose(_daily_solar_shape(np.array([minute]))[0], 0.0)
