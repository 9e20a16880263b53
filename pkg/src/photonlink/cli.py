"""Command-line front end.

Every artifact starts with the tool version, the fully resolved configuration,
the master seed and a SHA-256 of the canonical configuration JSON. Worker count
and output paths are not part of the configuration, so files written with
different ``--jobs`` are byte-identical.

Exit codes: 0 ok, 2 usage error, 3 model or runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from typing import Callable

from . import __version__
from .channel import (
    POLICY_DROP,
    POLICY_RANDOM_BIT,
    RunConfig,
    exact_ber,
    no_signaling_test,
    run_trials,
    summarize,
    sweep_m,
)
from .devices import AmplifierModel, MIN_COVARIANT_TRUNCATION
from .errors import SimulationError
from .fock import DEFAULT_LEAKAGE_TOL, CountDistribution, LeakageExceeded
from .states import (
    BELL,
    SPDC_UNENTANGLED,
    EventClass,
    chsh_value,
    double_detection_amplitude,
    event_probabilities,
    source_pair,
)
from .streams import MASK64

TOOL = "photonlink"
SOURCES = {"bell": BELL, "spdc-u": SPDC_UNENTANGLED}
AMPLIFIERS = ("paper", "urn", "covariant")
POLICIES = {"random-bit": POLICY_RANDOM_BIT, "drop-trial": POLICY_DROP}
TRIAL_COLUMNS = ("trial_index", "sent_bit", "event_class", "n_r", "n_r_prime", "readout_bit")
DEFAULT_ANGLES = (0.0, 22.5, 45.0, 67.5)
PMF_FLOOR = 1e-15


class UsageError(Exception):
    """Flag combination the parser alone cannot reject."""


def fmt(x: float) -> str:
    return "%.12g" % x


def canonical(obj):
    """Round floats to 12 significant digits, recursively, so text output is stable."""
    if isinstance(obj, bool) or obj is None:
        return obj
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            return None
        return float(fmt(obj))
    if isinstance(obj, dict):
        return {str(k): canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [canonical(v) for v in obj]
    return obj


def config_hash(config: dict) -> str:
    text = json.dumps(canonical(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def header(command: str, config: dict) -> dict:
    return {
        "tool": TOOL,
        "version": __version__,
        "command": command,
        "seed": config.get("seed"),
        "config": canonical(config),
        "config_sha256": config_hash(config),
    }


def render_json(meta: dict, result: dict) -> str:
    return json.dumps({**meta, "result": canonical(result)}, indent=2, sort_keys=True) + "\n"


def render_csv(meta: dict, columns: tuple, rows: list, extra: dict | None = None) -> str:
    buf = io.StringIO()
    for key in ("tool", "version", "command", "seed", "config_sha256"):
        buf.write(f"# {key}: {meta[key]}\n")
    buf.write(f"# config: {json.dumps(meta['config'], sort_keys=True, separators=(',', ':'))}\n")
    for key, value in (extra or {}).items():
        buf.write(f"# {key}: {json.dumps(canonical(value), sort_keys=True, separators=(',', ':'))}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(["" if v is None else fmt(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def emit(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= value <= MASK64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64 - 1]")
    return value


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def non_negative_int(text: str) -> int:
    value = int(text) if text.lstrip("-").isdigit() else None
    if value is None or value < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {text!r}")
    return value


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", metavar="PATH", help="write the artifact here (default: standard output)")
    p.add_argument("--format", choices=("json", "csv"), default="json")


def _add_amplifier(p: argparse.ArgumentParser, with_m: bool = True) -> None:
    p.add_argument("--amplifier", choices=AMPLIFIERS, default="paper")
    if with_m:
        p.add_argument("--m", type=non_negative_int, default=None, help="amplification parameter (default 100)")
        p.add_argument("--gain", type=float, default=None, help="covariant model only: gain G (instead of --m)")
    p.add_argument(
        "--truncation",
        type=positive_int,
        default=None,
        help="covariant model: minimum photon-number cap per mode; raised automatically "
        "until the leakage bound holds unless --strict-truncation is given",
    )
    p.add_argument("--strict-truncation", action="store_true", help="use --truncation exactly")
    p.add_argument("--leakage-tol", type=float, default=DEFAULT_LEAKAGE_TOL)


def _add_run(p: argparse.ArgumentParser) -> None:
    p.add_argument("--source", choices=tuple(SOURCES), default="bell")
    p.add_argument("--trials", type=positive_int, default=10_000)
    p.add_argument("--seed", type=u64, default=0)
    p.add_argument("--threshold", type=positive_int, default=None, help="decoder |delta| threshold (default ceil((m+1)/2))")
    p.add_argument("--policy", choices=tuple(POLICIES), default="random-bit", help="non-coincidence handling")
    p.add_argument("--jobs", type=positive_int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=TOOL, description="Entangled-photon link simulator.")
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Monte Carlo channel estimate")
    _add_amplifier(p)
    _add_run(p)
    _add_output(p)
    p.add_argument("--trials-csv", metavar="PATH", help="also write one CSV row per trial")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("sweep", help="BER and SNR as a function of m")
    _add_amplifier(p, with_m=False)
    _add_run(p)
    _add_output(p)
    p.add_argument("--m-values", type=non_negative_int, nargs="+", default=[16, 64, 256, 1024])
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("nosignal", help="can the receiver alone tell the sender's setting?")
    _add_amplifier(p)
    p.add_argument("--source", choices=tuple(SOURCES), default="bell")
    p.add_argument("--basis-pair", type=float, nargs=2, default=[0.0, 45.0], metavar=("A", "B"))
    p.add_argument("--seed", type=u64, default=0, help="recorded only; the computation is exact")
    _add_output(p)
    p.set_defaults(handler=cmd_nosignal)

    for name, handler in (("spdc", cmd_spdc), ("chsh", cmd_chsh)):
        p = sub.add_parser(name, help="source-state analysis" if name == "spdc" else "CHSH values")
        p.add_argument("--angles", type=float, nargs=4, default=list(DEFAULT_ANGLES), metavar=("A", "B", "A2", "B2"))
        p.add_argument("--seed", type=u64, default=0, help="recorded only; the computation is exact")
        _add_output(p)
        p.set_defaults(handler=handler)
    return parser


def amplifier_from_args(args, m: int | None = None) -> AmplifierModel:
    m = m if m is not None else getattr(args, "m", None)
    gain = getattr(args, "gain", None)
    if args.amplifier != "covariant":
        if gain is not None:
            raise UsageError("--gain applies to the covariant amplifier only")
        if args.truncation is not None or args.strict_truncation:
            raise UsageError("--truncation applies to the covariant amplifier only")
        m = 100 if m is None else m
        return AmplifierModel.paper(m) if args.amplifier == "paper" else AmplifierModel.urn(m)
    if gain is not None and m is not None:
        raise UsageError("give --m or --gain, not both")
    if gain is not None and gain < 1:
        raise UsageError("--gain must be >= 1")
    if not args.leakage_tol > 0:
        raise UsageError("--leakage-tol must be > 0")
    if args.strict_truncation and args.truncation is None:
        raise UsageError("--strict-truncation needs --truncation")
    kw = {"leakage_tol": args.leakage_tol}
    if args.strict_truncation:
        kw["n_max"] = args.truncation
    else:
        kw["min_truncation"] = args.truncation or MIN_COVARIANT_TRUNCATION
    if gain is not None:
        return AmplifierModel.covariant(gain=gain, **kw)
    return AmplifierModel.covariant(100 if m is None else m, **kw)


def _run_config(args, amplifier: AmplifierModel) -> RunConfig:
    try:
        return RunConfig(
            source=SOURCES[args.source],
            amplifier=amplifier,
            trials=args.trials,
            master_seed=args.seed,
            threshold=args.threshold,
            non_coincidence_policy=POLICIES[args.policy],
        )
    except ValueError as exc:
        raise UsageError(str(exc))


def cmd_simulate(args) -> None:
    cfg = _run_config(args, amplifier_from_args(args))
    config = cfg.to_dict()
    meta = header("simulate", config)
    tally, records = run_trials(cfg, jobs=args.jobs, keep_records=args.trials_csv is not None)
    est = summarize(cfg, tally)
    result = est.to_dict()
    result["ber_exact"] = exact_ber(cfg)
    if args.format == "json":
        text = render_json(meta, result)
    else:
        conf = est.confusion
        cols = ("ber", "ci_low", "ci_high", "ber_exact", "mi", "mi_plugin", "capacity", "snr",
                "snr_empirical", "trials", "retained", "n00", "n01", "n10", "n11")
        row = [result[c] for c in cols[:11]] + [int(v) for v in conf.ravel()]
        text = render_csv(meta, cols, [row])
    emit(text, args.out)
    if records is not None:
        rows = [
            (
                r.trial_index,
                r.sent_bit,
                r.event_class.value,
                None if r.counts is None else r.counts.n_r,
                None if r.counts is None else r.counts.n_r_prime,
                r.readout_bit,
            )
            for r in records
        ]
        emit(render_csv(meta, TRIAL_COLUMNS, rows), args.trials_csv)
    if args.out not in (None, "-"):
        print(f"ber {fmt(est.ber)} [{fmt(est.ber_ci[0])}, {fmt(est.ber_ci[1])}]  "
              f"mi {fmt(est.mutual_information)}  capacity {fmt(est.capacity)}  snr {fmt(est.snr)}")


def cmd_sweep(args) -> None:
    if len(args.m_values) < 2:
        raise UsageError("--m-values needs at least two entries")
    if args.threshold is not None:
        raise UsageError("sweep uses the default threshold for each m")
    base = _run_config(args, amplifier_from_args(args, m=args.m_values[0]))
    config = {**base.to_dict(), "m_values": list(args.m_values)}
    for key in ("m", "gain", "truncation", "threshold"):
        config.pop(key)
    meta = header("sweep", config)
    res = sweep_m(base, args.m_values, jobs=args.jobs)
    cols = ("m", "ber", "ci_low", "ci_high", "ber_exact", "snr", "snr_empirical")
    if args.format == "json":
        text = render_json(meta, {"rows": res.rows, "loglog_slope": res.slope, "loglog_intercept": res.intercept})
    else:
        rows = [[r[c] for c in cols] for r in res.rows]
        text = render_csv(meta, cols, rows, extra={"loglog_slope": res.slope, "loglog_intercept": res.intercept})
    emit(text, args.out)
    if args.out not in (None, "-"):
        print(f"log-log snr slope {fmt(res.slope)}")


def _pmf_entries(dist: CountDistribution) -> list:
    grid = dist.grid
    return [[int(i), int(j), float(grid[i, j])] for i, j in zip(*(grid > PMF_FLOOR).nonzero())]


def cmd_nosignal(args) -> None:
    amp = amplifier_from_args(args)
    config = {
        "source": SOURCES[args.source],
        "amplifier": amp.kind.value,
        "m": amp.m,
        "gain": amp.gain,
        "truncation": amp.n_max,
        "leakage_tol": amp.leakage_tol if args.amplifier == "covariant" else None,
        "basis_pair": list(args.basis_pair),
        "receiver_basis": 0.0,
        "seed": args.seed,
    }
    meta = header("nosignal", config)
    try:
        rep = no_signaling_test(amp, source=SOURCES[args.source], basis_pair=tuple(args.basis_pair))
    except LeakageExceeded as exc:
        raise SimulationError(f"{exc} (try a larger --truncation, or omit --strict-truncation to size it automatically)") from exc
    summary = {"tv_distance": rep.tv_distance, "mi_upper": rep.mi_upper, "js_divergence": rep.js_divergence,
               "leakage": max(rep.setting0_pmf.leakage, rep.setting1_pmf.leakage)}
    if args.format == "json":
        result = {**summary, "pmf_floor": PMF_FLOOR,
                  "setting0_pmf": _pmf_entries(rep.setting0_pmf), "setting1_pmf": _pmf_entries(rep.setting1_pmf)}
        text = render_json(meta, result)
    else:
        g0, g1 = rep.setting0_pmf.grid, rep.setting1_pmf.grid
        keep = (g0 > PMF_FLOOR) | (g1 > PMF_FLOOR)
        rows = [[int(i), int(j), float(g0[i, j]), float(g1[i, j])] for i, j in zip(*keep.nonzero())]
        text = render_csv(meta, ("n_r", "n_r_prime", "p_setting0", "p_setting1"), rows, extra=summary)
    emit(text, args.out)
    if args.out not in (None, "-"):
        print(f"tv_distance {fmt(rep.tv_distance)}  mi_upper {fmt(rep.mi_upper)}")


def _key_value(args, command: str, result: dict) -> None:
    config = {"angles": list(args.angles), "seed": args.seed}
    meta = header(command, config)
    if args.format == "json":
        text = render_json(meta, result)
    else:
        flat = []
        for key, value in result.items():
            if isinstance(value, dict):
                flat += [(f"{key}.{k}", v) for k, v in value.items()]
            else:
                flat.append((key, value))
        text = render_csv(meta, ("key", "value"), flat)
    emit(text, args.out)


def cmd_spdc(args) -> None:
    pair = source_pair(SPDC_UNENTANGLED)
    probs = event_probabilities(pair)
    result = {
        "psi_norm": pair.norm(),
        "coincidence_prob": probs[EventClass.COINCIDENCE],
        "both_signal_prob": probs[EventClass.BOTH_SIGNAL],
        "both_idler_prob": probs[EventClass.BOTH_IDLER],
        "double_detection_norms": {
            "signal": double_detection_amplitude(pair, "signal"),
            "idler": double_detection_amplitude(pair, "idler"),
        },
        "chsh_bell": chsh_value(source_pair(BELL), args.angles),
        "chsh_spdc_u": chsh_value(pair, args.angles),
    }
    _key_value(args, "spdc", result)


def cmd_chsh(args) -> None:
    result = {
        "chsh_bell": chsh_value(source_pair(BELL), args.angles),
        "chsh_spdc_u": chsh_value(source_pair(SPDC_UNENTANGLED), args.angles),
        "tsirelson_bound": 2 * math.sqrt(2),
    }
    _key_value(args, "chsh", result)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad flags
    handler: Callable = args.handler
    try:
        handler(args)
    except (UsageError, ValueError) as exc:
        parser.error(str(exc))
    except SimulationError as exc:
        print(f"{TOOL}: error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"{TOOL}: error: {exc}", file=sys.stderr)
        return 3
    return 0


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
