"""Command-line driver: ``varnet gen-data | train | evaluate | compare``.

Settings come from an INI file (the bundled ``default.cfg`` unless
``--config`` is given); any key can be overridden as ``--section.key VALUE``.
Outputs go under ``paths.run_dir`` next to a ``manifest.json`` that records
the config hash and seeds of every command run there.

Exit codes: 0 success, 1 contract/input error, 2 numerical divergence.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from . import __version__
from .baselines import DualDecompConfig
from .errors import ContractError, DivergenceError, VarnetError
from .evaluation import METHODS, EvalReport, baseline_reports, compare, simulate_realtime, write_reports_csv
from .feeder import FeederModel, VoltageLimits, ieee13, load_feeder
from .policy import Architecture, deserialize_params, serialize_params
from .scenarios import (
    AugmentConfig,
    InputMap,
    augment,
    hour_window,
    ingest_traces,
    measured_scenarios,
    synthetic_traces,
    write_traces,
)
from .trainer import TrainConfig, train

logger = logging.getLogger("varnet")

EXIT_OK, EXIT_CONTRACT, EXIT_DIVERGENCE = 0, 1, 2


class ConfigError(ContractError):
    pass


def default_config_text():
    return resources.files("varnet").joinpath("data", "default.cfg").read_text()


def load_config(path=None, overrides=None):
    """Bundled defaults, then ``path``, then ``overrides`` (``{"section.key": value}``)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";",))
    cp.read_string(default_config_text())
    known = {(s, k) for s in cp.sections() for k in cp[s]}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        extra = configparser.ConfigParser(inline_comment_prefixes=(";",))
        try:
            extra.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        for s in extra.sections():
            for k, v in extra[s].items():
                if (s, k) not in known:
                    raise ConfigError(f"{path}: unknown setting [{s}] {k}")
                cp[s][k] = v
    for dotted, v in (overrides or {}).items():
        s, k = dotted.split(".", 1)
        if (s, k) not in known:
            raise ConfigError(f"unknown setting {dotted}")
        cp[s][k] = str(v)
    return cp


def config_text(cp):
    """Canonical text form (sorted sections and keys) used for hashing."""
    lines = []
    for s in sorted(cp.sections()):
        lines.append(f"[{s}]")
        lines.extend(f"{k} = {cp[s][k]}" for k in sorted(cp[s]))
        lines.append("")
    return "\n".join(lines)


def config_hash(cp):
    return hashlib.sha256(config_text(cp).encode()).hexdigest()


def _get(cp, section, key, kind):
    raw = cp[section][key].strip()
    try:
        if kind is bool:
            return cp.getboolean(section, key)
        if kind == "ints":
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if kind == "opt_int":
            return int(raw) if raw else None
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


# --------------------------------------------------------------------------
# building blocks


def run_dir(cp):
    d = Path(cp["paths"]["run_dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def traces_path(cp):
    p = cp["paths"]["traces"].strip()
    return Path(p) if p else Path(cp["paths"]["run_dir"]) / "traces.csv"


def build_topology(cp):
    v0 = _get(cp, "limits", "v0", float)
    d = cp["paths"]["feeder_dir"].strip()
    if not d:
        return ieee13(v0=v0)
    d = Path(d)
    solar = d / "solar.csv"
    return load_feeder(d / "feeder.csv", d / "inverters.csv", solar if solar.exists() else None, v0=v0)


def build_model(cp, topology):
    limits = VoltageLimits.uniform(
        topology.n_buses, _get(cp, "limits", "v_lo", float), _get(cp, "limits", "v_hi", float)
    )
    return FeederModel.from_topology(topology, limits)


def build_arch(cp, topology):
    return Architecture.for_feeder(
        topology,
        n_telemetry=len(_get(cp, "data", "telemetry_buses", "ints")),
        d_u=_get(cp, "policy", "d_u", int),
        utility_hidden=_get(cp, "policy", "utility_hidden", "ints"),
        inverter_hidden=_get(cp, "policy", "inverter_hidden", "ints"),
    )


def train_config(cp):
    g = lambda k, t=float: _get(cp, "train", k, t)  # noqa: E731
    return TrainConfig(
        epochs=g("epochs", int),
        primal_lr=g("primal_lr"),
        beta1=g("beta1"),
        beta2=g("beta2"),
        eps=g("eps"),
        dual_step=g("dual_step"),
        dual_decay=g("dual_decay"),
        batch_size=g("batch_size", int),
        reshuffle=g("reshuffle", bool),
        seed=g("seed", int),
    )


def windows(cp):
    h = _get(cp, "window", "train_hour", int)
    t = _get(cp, "window", "test_hour", "opt_int")
    return h, h + 1 if t is None else t


def seeds(cp):
    return {s: _get(cp, s, "seed", int) for s in ("data", "augment", "train")}


def load_window(cp, topology, hour):
    """Measured scenarios for one hour of the configured traces."""
    path = traces_path(cp)
    if not path.exists():
        raise ConfigError(f"trace file {path} not found; run `varnet gen-data` first or set paths.traces")
    traces = ingest_traces(path, _get(cp, "data", "scale_factor", float))
    ts = traces[0].timestamps
    start, end = hour_window(hour)
    if hour < 0 or start < ts[0] or end > ts[-1] + 1:
        raise ConfigError(f"hour {hour} lies outside the trace range of minutes [{ts[0]}, {ts[-1] + 1})")
    imap = InputMap(topology, _get(cp, "data", "telemetry_buses", "ints"))
    sc = measured_scenarios(
        traces,
        imap,
        start,
        end,
        _get(cp, "data", "pf_lo", float),
        _get(cp, "data", "pf_hi", float),
        seed=_get(cp, "data", "seed", int),
    )
    return sc, imap


def update_manifest(cp, command, outputs):
    d = run_dir(cp)
    path = d / "manifest.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    doc["varnet_version"] = __version__
    doc.setdefault("commands", {})[command] = {
        "config_sha256": config_hash(cp),
        "seeds": seeds(cp),
        "outputs": sorted(str(Path(o).relative_to(d)) if Path(o).is_relative_to(d) else str(o) for o in outputs),
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    (d / f"{command}.cfg").write_text(config_text(cp))


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cp, args):
    topo = build_topology(cp)
    traces = synthetic_traces(
        topo,
        days=_get(cp, "data", "days", int),
        seed=_get(cp, "data", "seed", int),
        scale=_get(cp, "data", "gen_scale", float),
    )
    run_dir(cp)
    out = traces_path(cp)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_traces(out, traces)
    update_manifest(cp, "gen-data", [out])
    print(f"wrote {len(traces)} bus traces x {traces[0].timestamps.size} minutes to {out}")
    return EXIT_OK


def cmd_train(cp, args):
    topo = build_topology(cp)
    model = build_model(cp, topo)
    h, _ = windows(cp)
    measured, imap = load_window(cp, topo, h)
    aug = AugmentConfig(
        _get(cp, "augment", "replication_factor", int),
        _get(cp, "augment", "noise_std", float),
        _get(cp, "augment", "seed", int),
    )
    scen = augment(measured, aug, imap)
    d = run_dir(cp)
    scen_path = d / "train_scenarios.jsonl"
    scen.to_jsonl(scen_path)
    arch = build_arch(cp, topo)
    cfg = train_config(cp)
    trace_path = d / "training_trace.csv"
    logger.info("training on hour %d: %d scenarios, %d epochs", h, len(scen), cfg.epochs)
    try:
        res = train(scen.scenarios, arch, model, cfg)
    except DivergenceError as exc:
        if exc.trace is not None:
            exc.trace.to_csv(trace_path)
        raise
    start, end = hour_window(h)
    model_path = d / "model.json"
    serialize_params(
        res.params,
        model_path,
        {
            "train_hour": h,
            "window_start_minute": start,
            "window_end_minute": end,
            "n_scenarios": len(scen),
            "config_sha256": config_hash(cp),
            "seeds": seeds(cp),
            "dual_final": [float(x) for x in res.dual],
        },
    )
    res.trace.to_csv(trace_path)
    outputs = [scen_path, model_path, trace_path]
    if _get(cp, "train", "dump_dual", bool):
        dual_path = d / "dual_trace.csv"
        res.trace.dual_to_csv(dual_path)
        outputs.append(dual_path)
    update_manifest(cp, "train", outputs)
    last = res.trace.epochs[-1]
    print(
        f"trained {cfg.epochs} epochs on {len(scen)} scenarios: avg loss {last.avg_loss:.6g}, "
        f"max avg g {last.avg_max_g:.3g}, lambda max {last.lambda_max:.4g} -> {model_path}"
    )
    return EXIT_OK


def cmd_evaluate(cp, args):
    topo = build_topology(cp)
    model = build_model(cp, topo)
    _, t = windows(cp)
    d = run_dir(cp)
    model_path = Path(args.model) if args.model else d / "model.json"
    if not model_path.exists():
        raise ConfigError(f"model file {model_path} not found; run `varnet train` first")
    params = deserialize_params(model_path, expected_arch=build_arch(cp, topo))
    test, _ = load_window(cp, topo, t)
    dd = DualDecompConfig(
        iterations=_get(cp, "baselines", "iterations", int),
        dual_step=_get(cp, "baselines", "dual_step", float),
        dual_decay=_get(cp, "baselines", "dual_decay", float),
    )
    reports = [simulate_realtime(params, test, model)] + baseline_reports(test, model, dd)
    rep_dir = d / "reports"
    rep_dir.mkdir(exist_ok=True)
    outputs = []
    for r in reports:
        r.metadata["test_hour"] = t
        p = rep_dir / f"{r.method}.json"
        r.to_json(p)
        outputs.append(p)
    csv_path = d / "reports.csv"
    write_reports_csv(reports, csv_path)
    table = compare(reports)
    table_path = d / "comparison.csv"
    table.to_csv(table_path)
    update_manifest(cp, "evaluate", outputs + [csv_path, table_path])
    print(f"test hour {t}, {len(test)} timesteps")
    print(format_table(table))
    return EXIT_OK


def cmd_compare(cp, args):
    files = [Path(f) for f in args.reports]
    if not files:
        files = sorted((Path(cp["paths"]["run_dir"]) / "reports").glob("*.json"))
    if not files:
        raise ConfigError("no report files given or found under <run_dir>/reports")
    reports = []
    for f in files:
        try:
            reports.append(EvalReport.from_json(f))
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report {f}: {exc}") from exc
    rank = {m: i for i, m in enumerate(METHODS)}
    reports.sort(key=lambda r: rank.get(r.method, len(rank)))
    table = compare(reports, reference=args.reference)
    if args.output:
        table.to_csv(args.output)
    print(format_table(table))
    return EXIT_OK


def format_table(table):
    cols = ("method", "avg_loss", "violating_timesteps", "violation_energy", "avg_constraint_residual", "comm_bytes", "loss_gap_vs_optimal")
    rows = [cols] + [
        tuple(f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]) for c in cols) for r in table.rows
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


class _Parser(argparse.ArgumentParser):
    # usage errors share the contract exit code; 2 is reserved for divergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file layered over the bundled defaults")
    common.add_argument("--run-dir", help="shorthand for --paths.run_dir")
    common.add_argument("-v", "--verbose", action="count", default=0)
    defaults = configparser.ConfigParser(inline_comment_prefixes=(";",))
    defaults.read_string(default_config_text())
    group = common.add_argument_group("config overrides")
    for s in defaults.sections():
        for k in defaults[s]:
            group.add_argument(f"--{s}.{k}", dest=f"set:{s}.{k}", metavar="VALUE", default=None)

    parser = _Parser(prog="varnet", description="Train and evaluate two-tier reactive-power policies.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic load/solar traces")
    sub.add_parser("train", parents=[common], help="train a policy on the training hour")
    p = sub.add_parser("evaluate", parents=[common], help="replay the test hour for the policy and baselines")
    p.add_argument("--model", help="model file (default <run_dir>/model.json)")
    p = sub.add_parser("compare", parents=[common], help="tabulate saved reports")
    p.add_argument("reports", nargs="*", help="report JSON files (default <run_dir>/reports/*.json)")
    p.add_argument("--reference", default="optimal_policy")
    p.add_argument("--output", help="write the table as CSV")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set:") and v is not None}
    if args.run_dir:
        overrides["paths.run_dir"] = args.run_dir
    try:
        cp = load_config(args.config, overrides)
        return COMMANDS[args.command](cp, args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (VarnetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
