"""Command-line entry point: ``macbound <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (plain key=value lines, keys named
like the long flags with dashes or underscores); explicit flags override the
file.  Output goes to ``--output`` (written atomically) or stdout, as CSV
with a trailing '#' metadata block or as JSON.

Exit status: 0 on success, 2 on usage errors, 1 when a computation fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .scalar_channel import ChannelModel, TrivialBoundError

log = logging.getLogger("macbound")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

SCALAR_OPS = ("mmse", "mi", "denoise", "psi", "threshold", "pi-star", "epsilon-star",
              "epsilon-tilde-star", "q-tail", "q-tail-inverse")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# parsing helpers


def parse_grid(text: str) -> np.ndarray:
    """'lo:hi:points:lin|log' (or a single number) -> array."""
    parts = text.split(":")
    if len(parts) == 1:
        return np.array([float(parts[0])])
    if len(parts) != 4 or parts[3] not in ("lin", "log"):
        raise ValueError(f"grid spec must be lo:hi:points:lin|log, got {text!r}")
    lo, hi, pts = float(parts[0]), float(parts[1]), int(parts[2])
    if pts < 1 or hi < lo or (parts[3] == "log" and lo <= 0):
        raise ValueError(f"invalid grid {text!r}: need points >= 1, hi >= lo (> 0 for log)")
    return np.geomspace(lo, hi, pts) if parts[3] == "log" else np.linspace(lo, hi, pts)


def parse_window(text: str) -> tuple[float, float]:
    lo, hi = (float(x) for x in text.split(":"))
    if not lo < hi:
        raise ValueError(f"window must be lo:hi with lo < hi, got {text!r}")
    return lo, hi


def _grid(flag: str, text: str) -> np.ndarray:
    try:
        return parse_grid(text)
    except ValueError as exc:
        raise UsageError(f"{flag}: {exc}") from None


def read_config(path: str) -> dict:
    out = {}
    for num, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{num}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip().lstrip("-").replace("-", "_")] = val.strip()
    return out


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value file; flags override its entries")
    p.add_argument("--output", "-o", help="output path (default stdout)")
    p.add_argument("--format", choices=("csv", "json"), default=None, help="output format (csv)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap (default $MACBOUND_THREADS or 1)")
    p.add_argument("--log-level", default=None, help="logging level (WARNING)")


def _channel(p: argparse.ArgumentParser, k_default=None):
    p.add_argument("--channel", choices=("awgn", "qsf"), default=None)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--k", type=int, default=k_default, help="payload bits, M = 2^k")
    g.add_argument("--M", type=int, default=None, help="messages per user (power of two)")


def _energy(p: argparse.ArgumentParser):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--E", type=float, default=None, help="total energy per codeword")
    g.add_argument("--ebn0", type=float, default=None, help="Eb/N0 in dB")


def _coupling(p: argparse.ArgumentParser):
    p.add_argument("--omega", type=int, default=None)
    p.add_argument("--Lambda", type=int, default=None)
    p.add_argument("--rho", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="macbound", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"macbound {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{scalar,potential,se,bound,simulate}")

    p = sub.add_parser("scalar", help="scalar-channel quantities")
    _common(p)
    _channel(p)
    p.add_argument("--op", choices=SCALAR_OPS, default=None)
    p.add_argument("--tau", default=None, help="value or grid lo:hi:points:lin|log")
    p.add_argument("--theta", type=float, default=None, help="threshold (psi)")
    p.add_argument("--value", type=float, default=None, help="observation (denoise, real part)")
    p.add_argument("--value-imag", type=float, default=0.0, help="imaginary part (QSF)")
    p.add_argument("--x", default=None, help="argument of q-tail / log p of q-tail-inverse")

    p = sub.add_parser("potential", help="sampled potential landscape")
    _common(p)
    _channel(p)
    _energy(p)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--points", type=int, default=2000)

    p = sub.add_parser("se", help="coupled state evolution")
    _common(p)
    _channel(p)
    _energy(p)
    _coupling(p)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--t-max", type=int, default=10000)
    p.add_argument("--init", choices=("infinite", "matched"), default="infinite")

    p = sub.add_parser("bound", help="minimum Eb/N0 curve")
    _common(p)
    _channel(p)
    p.add_argument("--eps", type=float, default=None, help="target PUPE")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--mu-grid", default=None, help="lo:hi:points:lin|log")
    g.add_argument("--mu", type=float, default=None)
    p.add_argument("--window", default="-5:60", help="Eb/N0 search window lo:hi in dB")
    p.add_argument("--uncoupled", action="store_true", help="scalar-AMP (uncoupled) bound")
    p.add_argument("--no-warm-start", action="store_true")
    p.add_argument("--refine-jumps", action="store_true",
                   help="bisect mu where the curve rises by more than 1 dB")

    p = sub.add_parser("simulate", help="finite-n AMP Monte Carlo")
    _common(p)
    _channel(p)
    _energy(p)
    _coupling(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--T", type=int, default=None, help="AMP iterations (default: SE converged)")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold-scale", type=float, default=1.0)
    parser.subcommands = sub.choices
    return parser


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError("a subcommand is required")
    if args.config:
        conf = read_config(args.config)
        sub = parser.subcommands[args.command]
        # keys used by other subcommands are ignored so one file can serve several
        known = {a.dest for p in parser.subcommands.values() for a in p._actions}
        unknown = sorted(set(conf) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        # re-parse with config values as defaults so explicit flags win
        defaults = {}
        for act in sub._actions:
            if act.dest in conf:
                raw = conf[act.dest]
                if isinstance(act, argparse._StoreTrueAction):
                    defaults[act.dest] = raw.lower() in ("1", "true", "yes", "on")
                else:
                    defaults[act.dest] = act.type(raw) if act.type else raw
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if args.format is None:
        args.format = "csv"
    return args


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _check(cond, flag, valid):
    if not cond:
        raise UsageError(f"{flag}: must be {valid}")


def _model(args) -> ChannelModel:
    _require(args, "channel")
    if args.M is not None:
        _check(args.M >= 2 and args.M & (args.M - 1) == 0, "--M", "a power of two >= 2")
        k = args.M.bit_length() - 1
    else:
        _require(args, "k")
        k = args.k
    _check(k >= 1, "--k", ">= 1")
    return ChannelModel(args.channel, k)


def _energy_value(args, ch) -> float:
    from .bounds import energy_from_ebn0

    if args.E is None and args.ebn0 is None:
        raise UsageError("one of --E or --ebn0 is required")
    if args.E is not None:
        _check(args.E > 0, "--E", "> 0")
        return args.E
    return energy_from_ebn0(ch, args.ebn0)


def _base(args):
    from .state_evolution import base_matrix

    _require(args, "omega", "Lambda")
    _check(args.omega >= 1, "--omega", ">= 1")
    _check(args.Lambda >= 2 * args.omega - 1, "--Lambda", f">= 2*omega-1 = {2 * args.omega - 1}")
    _check(0 <= args.rho < 1, "--rho", "in [0, 1)")
    _check(not (args.rho > 0 and args.Lambda == 1), "--rho", "0 when Lambda = 1")
    return base_matrix(args.omega, args.Lambda, args.rho)


# ---------------------------------------------------------------------------
# output


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _json_value(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else repr(float(x))
    return x


def render(columns, rows, meta: dict, fmt: str) -> str:
    if fmt == "json":
        doc = {"columns": list(columns),
               "rows": [[_json_value(v) for v in r] for r in rows],
               "meta": {k: _json_value(v) for k, v in meta.items()}}
        return json.dumps(doc, indent=1, sort_keys=False) + "\n"
    lines = [",".join(columns)]
    lines += [",".join(_fmt(v) for v in r) for r in rows]
    lines += [f"# {k}={_fmt(v)}" for k, v in meta.items()]
    return "\n".join(lines) + "\n"


def write_atomic(path: str, text: str):
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _resolved(args) -> dict:
    skip = {"config", "output", "format", "log_level", "threads"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}


def _meta(args, extra=None) -> dict:
    meta = {"version": __version__, "command": args.command}
    meta.update({f"config.{k}": v for k, v in _resolved(args).items() if k != "command"})
    meta.update(extra or {})
    return meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_scalar(args):
    from . import scalar_channel as sc

    _require(args, "op")
    ch = _model(args)
    op = args.op
    if op in ("q-tail", "q-tail-inverse"):
        _require(args, "x")
        xs = _grid("--x", args.x)
        if op == "q-tail-inverse":
            _check(np.all(xs < 0), "--x", "< 0 (natural log of a probability)")
            rows = [(x, sc.q_tail_inverse_log(x)) for x in xs]
        else:
            rows = [(x, float(sc.log_q_tail(x))) for x in xs]
        return ["x", op], rows, {}, EXIT_OK
    _require(args, "tau")
    taus = _grid("--tau", args.tau)
    _check(np.all(taus > 0), "--tau", "> 0")
    rows = []
    failed = False
    for tau in taus:
        if op == "mmse":
            val = sc.mmse_scaled(ch, tau)
        elif op == "mi":
            val = sc.mutual_info_scaled(ch, tau)
        elif op == "denoise":
            _require(args, "value")
            v = complex(args.value, args.value_imag) if ch.is_complex else args.value
            val = sc.denoise(ch, sc.ScalarObservation(v, tau))
            val = abs(val) if ch.is_complex else val
        elif op == "psi":
            _require(args, "theta")
            _check(args.theta > 0, "--theta", "> 0")
            val = sc.psi_support_error(ch, tau, args.theta)
        elif op == "threshold":
            val = sc.optimal_threshold(ch, tau)
        elif op == "pi-star":
            val = sc.pi_star(tau, ch.k)
        else:
            try:
                val = (sc.epsilon_star(tau, ch.k) if op == "epsilon-star"
                       else sc.epsilon_tilde_star(tau, ch.k))
            except TrivialBoundError as exc:
                log.error("%s", exc)
                val, failed = math.nan, True
        rows.append((tau, val))
    return ["tau", op], rows, {}, EXIT_FAIL if failed else EXIT_OK


def cmd_potential(args):
    from .potential import SystemParams, global_minimizer

    ch = _model(args)
    _require(args, "mu")
    _check(args.mu >= 0, "--mu", ">= 0")
    _check(args.points >= 2000, "--points", ">= 2000")
    E = _energy_value(args, ch)
    land = global_minimizer(SystemParams(args.mu, E, ch), n=args.points)
    rows = list(zip(land.tau.tolist(), land.F.tolist(), land.is_min.tolist()))
    meta = {"E": E, "global_argmin_max": land.global_argmin_max, "tie": land.tie,
            "boundary": land.boundary,
            "minima": " ".join(f"{m.tau!r}:{m.F!r}" for m in land.minima)}
    return ["tau", "F", "is_min"], rows, meta, EXIT_OK


def cmd_se(args):
    from .state_evolution import coupled_pupe_prediction, se_run

    ch = _model(args)
    _require(args, "mu")
    _check(args.mu >= 0, "--mu", ">= 0")
    _check(args.tol > 0, "--tol", "> 0")
    _check(args.t_max >= 1, "--t-max", ">= 1")
    E = _energy_value(args, ch)
    res = se_run(ch, _base(args), args.mu, E, tol=args.tol, t_max=args.t_max, init=args.init)
    rows = [(t, c, res.tau[t, c], res.psi[t, c])
            for t in range(res.tau.shape[0]) for c in range(res.tau.shape[1])]
    pupe, thresholds = coupled_pupe_prediction(ch, res.profile)
    meta = {"E": E, "mu_eff": res.mu_eff, "converged": res.converged,
            "iterations": res.iterations, "pupe_prediction": pupe,
            "thresholds": " ".join(repr(float(x)) for x in thresholds)}
    return ["t", "c", "tau_c", "Mpsi_c"], rows, meta, EXIT_OK if res.converged else EXIT_FAIL


def cmd_bound(args):
    from .bounds import CSV_COLUMNS, single_user_ebn0_db, sweep_curve

    ch = _model(args)
    _require(args, "eps")
    _check(0 < args.eps < 1, "--eps", "in (0, 1)")
    if args.mu_grid is None and args.mu is None:
        raise UsageError("one of --mu-grid or --mu is required")
    try:
        mus = parse_grid(args.mu_grid) if args.mu_grid is not None else np.array([args.mu])
        window = parse_window(args.window)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _check(np.all(mus >= 0), "--mu-grid", ">= 0")
    recs = sweep_curve(ch, mus, args.eps, window, coupled=not args.uncoupled,
                       warm_start=not args.no_warm_start, refine_jumps=args.refine_jumps)
    rows = [(r.mu, r.ebn0_db, r.E, r.tau_star, r.pupe, r.phase_flag) for r in recs]
    failed = [r for r in recs if not r.ok]
    meta = {"single_user_ebn0_db": single_user_ebn0_db(ch, args.eps), "failed_rows": len(failed)}
    return list(CSV_COLUMNS), rows, meta, EXIT_FAIL if failed else EXIT_OK


def cmd_simulate(args):
    from .amp_sim import MAX_K, SimConfig, default_threads, monte_carlo

    ch = _model(args)
    _check(ch.k <= MAX_K, "--k", f"<= {MAX_K} for simulation")
    _require(args, "n", "K")
    base = _base(args)
    _check(args.n >= 1 and args.n % base.R == 0, "--n", f"a positive multiple of R = {base.R}")
    _check(args.K >= 1 and (args.K * 2 ** ch.k) % base.C == 0, "--K",
           f"positive with K*M divisible by C = {base.C}")
    _check(args.trials >= 1, "--trials", ">= 1")
    _check(args.T is None or args.T >= 1, "--T", ">= 1")
    _check(0 <= args.seed < 2 ** 64, "--seed", "in [0, 2^64)")
    _check(args.threshold_scale > 0, "--threshold-scale", "> 0")
    E = _energy_value(args, ch)
    try:
        cfg = SimConfig(ch, args.n, args.K, base, E, args.T, args.trials, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    threads = args.threads if args.threads is not None else default_threads()
    rep = monte_carlo(cfg, threshold_scale=args.threshold_scale, threads=threads)
    rows = [(t.trial, t.ser, t.m_dh, t.energy_mean) for t in rep.trials]
    ser, ser_se = rep.ser
    mdh, _ = rep.m_dh
    en, _ = rep.energy
    rows.append(("mean", ser, mdh, en))
    resid, resid_se = rep.resid_var()
    meta = {"E": E, "T": rep.T, "ser_stderr": ser_se, "predicted_ser": rep.predicted_ser,
            "predicted_bound": rep.predicted_bound, "failed_trials": rep.failed,
            "tau_se": " ".join(repr(float(x)) for x in rep.tau),
            "resid_var": " ".join(repr(float(x)) for x in resid),
            "resid_var_stderr": " ".join(repr(float(x)) for x in resid_se)}
    return ["trial", "ser", "m_dh", "energy_mean"], rows, meta, \
        EXIT_FAIL if rep.failed else EXIT_OK


COMMANDS = {"scalar": cmd_scalar, "potential": cmd_potential, "se": cmd_se,
            "bound": cmd_bound, "simulate": cmd_simulate}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:  # argparse usage errors and --help/--version
        return int(exc.code or 0)
    except (UsageError, ValueError, OSError) as exc:
        print(f"macbound: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    level = logging.getLevelName((args.log_level or "WARNING").upper())
    if not isinstance(level, int):
        print(f"macbound: error: --log-level: unknown level {args.log_level!r}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        columns, rows, meta, code = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"macbound {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # computation failure
        log.exception("%s failed: %s", args.command, exc)
        return EXIT_FAIL
    text = render(columns, rows, _meta(args, meta), args.format)
    if args.output:
        write_atomic(args.output, text)
    else:
        sys.stdout.write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
