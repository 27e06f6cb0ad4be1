"""Command-line entry point: ``twinbed <command> ...``.

Failures print a single ``error: <message>`` line on stderr and exit nonzero
(2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("twinbed")

DATA_DIR = Path(__file__).parent / "data"
LATEST = "LATEST"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # one machine-parsable line instead of usage text
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(2)


# -- commands -----------------------------------------------------------------

def cmd_up(args) -> int:
    from .runtime import Supervisor, load_topology
    topo = load_topology(args.topology)
    sup = Supervisor(topo)
    sup.up()
    names = [s.name for s in topo.enabled()]
    print(f"up: {' '.join(names)} ready (state {topo.state_dir})", flush=True)
    try:
        sup.wait(args.run_for)
    finally:
        sup.down()
        print("down: all components stopped", flush=True)
    return 0


def cmd_down(args) -> int:
    from .runtime import load_topology, signal_down
    topo = load_topology(args.topology)
    names = signal_down(topo.state_dir)
    print(f"down: signalled {' '.join(names)}")
    return 0


def cmd_component(args) -> int:
    import signal
    import threading
    from .runtime import run_component
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    upstream = None
    if args.upstream:
        host, _, port = args.upstream.rpartition(":")
        upstream = (host, int(port))
    run_component(args.name, args.port, Path(args.config), args.host, upstream, args.epoch,
                  Path(args.snapshot_dir) if args.snapshot_dir else None, stop)
    return 0


def cmd_scenario_run(args) -> int:
    from .attacks import load_scenario, run_scenario
    script = load_scenario(args.file)
    run = run_scenario(script, seed=args.seed, network=args.network)
    try:
        out = Path(args.out) if args.out else Path("runs") / script.name
        run.save(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        (out.parent / LATEST).write_text(str(out.resolve()))
    finally:
        run.testbed.close()
    for r in run.log:
        print(f"{r.t_ms}\t{r.action}\t{r.target}\t{r.outcome}")
    print(f"labels: {len(run.labels)} attack interval(s); run saved to {out}")
    return 1 if any(r.outcome == "FAILED" for r in run.log) and args.strict else 0


def _train_config(args):
    from .rlnav.train import TrainConfig
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    for k in ("steps", "seed", "zones"):
        v = getattr(args, k, None)
        if v is not None:
            setattr(cfg, k, v)
    if getattr(args, "tabular", False):
        cfg.tabular = True
    if getattr(args, "map", None):
        cfg.map_path = args.map
    return cfg


def _twin_map(spec: str):
    from .rlnav.env import map_from_twin
    from .tagbus import TagClient
    host, _, port = spec.rpartition(":")
    with TagClient(host or "127.0.0.1", int(port)) as c:
        return map_from_twin(c)


def cmd_rl_train(args) -> int:
    from .rlnav.train import train
    cfg = _train_config(args)
    grid = _twin_map(args.twin) if args.twin else None
    policy = train(cfg, grid, progress_every=args.progress)
    if cfg.tabular:
        print("trained tabular policy (not persisted)")
    else:
        policy.save(args.out)
        print(f"policy saved to {args.out}")
    if args.eval_episodes:
        from .rlnav.train import evaluate
        rep = evaluate(policy, args.eval_episodes)
        print(f"success_rate={rep.success_rate:.2f}")
    return 0


def cmd_rl_eval(args) -> int:
    from .rlnav.train import Policy, RandomPolicy, evaluate
    from .rlnav.env import EnvConfig, reference_map, load_map
    if args.random:
        grid = load_map(args.map) if args.map else reference_map()
        policy = RandomPolicy(grid, EnvConfig(), seed=args.seed)
    else:
        if not Path(args.policy).exists():
            raise CliError(f"policy file {args.policy} not found (run 'rl train' first)")
        policy = Policy.load(args.policy)
    rep = evaluate(policy, args.episodes, deterministic=args.deterministic)
    if args.report:
        rep.write_csv(args.report)
    print(f"success_rate={rep.success_rate:.2f} episodes={len(rep.episodes)}")
    return 0


def cmd_dose_probe(args) -> int:
    from .raddose import default_source_path, load_source, probe
    src = load_source(args.source or default_source_path())
    s = probe(src, (args.x, args.y, args.z))
    print(f"rate_sv_s={s.rate_sv_s!r} rate_sv_hr={3600.0 * s.rate_sv_s!r} zone={s.zone.value}")
    return 0


def _run_dir(arg: str | None) -> Path:
    if arg:
        return Path(arg)
    pointer = Path("runs") / LATEST
    if not pointer.exists():
        raise CliError("no run directory given and no runs/LATEST (run 'scenario run' first)")
    return Path(pointer.read_text().strip())


def cmd_export(args) -> int:
    from .historian import Historian
    run = _run_dir(args.run)
    hist_dir = run / "historian" if (run / "historian").is_dir() else run
    hist = Historian.from_snapshot(hist_dir)
    missing = [t for t in args.tags if t not in hist.series]
    if missing:
        raise CliError(f"unknown tag(s) {', '.join(missing)} in {hist_dir}")
    out = Path(args.out or f"{'_'.join(args.tags)}.csv")
    n = hist.export_csv(args.tags, args.t0, args.t1, out)
    gp = out.with_suffix(".gp")
    cols = " , ".join(f"'{out.name}' using ($1/1000):{i + 2} with lines title '{t}'"
                      for i, t in enumerate(args.tags))
    gp.write_text("set datafile separator ','\nset key autotitle columnhead\n"
                  "set xlabel 'time (s)'\nset grid\n"
                  f"set terminal pngcairo size 900,500\nset output '{out.with_suffix('.png').name}'\n"
                  f"plot {cols}\n")
    print(f"exported {n} rows to {out} (plot script {gp})")
    return 0


def cmd_detect_run(args) -> int:
    from .attacks import load_labels
    from .detect import (DetectorConfig, combine, evaluate, read_series_csv, spectral_detect,
                         write_detections, write_metrics, zscore_detect)
    cfg = DetectorConfig.from_file(args.config) if args.config else DetectorConfig()
    times, values, tag = read_series_csv(args.series, args.column)
    dets = []
    if args.kind in ("zscore", "both"):
        dets += zscore_detect(values, cfg, times, tag)
    if args.kind in ("spectral", "both"):
        from dataclasses import replace
        rate = args.sample_rate or (1000.0 / float(np.median(np.diff(times))) if len(times) > 1
                                    else cfg.sample_rate_hz)
        scfg = replace(cfg, sample_rate_hz=rate, max_freq_hz=min(cfg.max_freq_hz, rate / 2))
        dets += spectral_detect(values, scfg, times, tag)
    for d in sorted(dets, key=lambda d: d.t_ms):
        extra = "" if d.freq_hz is None else f" freq_hz={d.freq_hz:.3f}"
        print(f"{d.t_ms}\t{d.kind.value}\t{tag}\tscore={d.score:.3g}{extra}")
    if args.detections:
        write_detections(args.detections, dets)
    if args.labels:
        grace = int(cfg.window * np.median(np.diff(times))) if len(times) > 1 else 0
        m = combine([evaluate(dets, load_labels(args.labels), times, grace)])
        print(f"detection_rate={m.detection_rate:.3f} false_alarm_rate={m.false_alarm_rate:.6f} "
              f"mean_latency_ms={m.mean_latency_ms:.1f}")
        if args.report:
            write_metrics(args.report, m)
    print(f"{len(dets)} detection(s)")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="twinbed", description="Cyber-physical digital-twin testbed")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    up = sub.add_parser("up", help="start the component processes of a topology")
    up.add_argument("--topology", default=str(DATA_DIR / "topology.json"))
    up.add_argument("--run-for", type=float, default=None, help="stop after this many seconds")
    up.set_defaults(fn=cmd_up)
    down = sub.add_parser("down", help="stop a topology started with 'up'")
    down.add_argument("--topology", default=str(DATA_DIR / "topology.json"))
    down.set_defaults(fn=cmd_down)

    comp = sub.add_parser("component", help="run a single component (used by 'up')")
    comp.add_argument("name", choices=["plant", "plc", "historian", "twin"])
    comp.add_argument("--port", type=int, required=True)
    comp.add_argument("--config", required=True)
    comp.add_argument("--host", default="127.0.0.1")
    comp.add_argument("--upstream", default=None, help="host:port of the component polled")
    comp.add_argument("--epoch", type=float, default=None, help="wall-clock epoch (s)")
    comp.add_argument("--snapshot-dir", default=None)
    comp.set_defaults(fn=cmd_component)

    sc = sub.add_parser("scenario", help="attack scenarios").add_subparsers(
        dest="sub", required=True, parser_class=_Parser)
    run = sc.add_parser("run", help="run a scenario file on the lock-step testbed")
    run.add_argument("file")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", default=None, help="run directory (default runs/<name>)")
    run.add_argument("--network", action="store_true", help="use localhost TCP links")
    run.add_argument("--strict", action="store_true", help="exit 1 if any event FAILED")
    run.set_defaults(fn=cmd_scenario_run)

    rl = sub.add_parser("rl", help="navigation agent").add_subparsers(
        dest="sub", required=True, parser_class=_Parser)
    tr = rl.add_parser("train")
    tr.add_argument("--config", default=None, help="key=value training config")
    tr.add_argument("--steps", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--zones", type=int, default=None)
    tr.add_argument("--map", default=None)
    tr.add_argument("--twin", default=None, metavar="HOST:PORT",
                    help="read the map from the twin mirror's NAV_MAP tag")
    tr.add_argument("--tabular", action="store_true")
    tr.add_argument("--out", default="policy.npz")
    tr.add_argument("--progress", type=int, default=0, help="log every N episodes")
    tr.add_argument("--eval-episodes", type=int, default=0)
    tr.set_defaults(fn=cmd_rl_train)
    ev = rl.add_parser("eval")
    ev.add_argument("--policy", default="policy.npz")
    ev.add_argument("--episodes", type=int, default=50)
    ev.add_argument("--deterministic", action="store_true", default=True)
    ev.add_argument("--stochastic", dest="deterministic", action="store_false")
    ev.add_argument("--random", action="store_true", help="evaluate a uniform random policy")
    ev.add_argument("--map", default=None)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--report", default=None, help="per-episode CSV report")
    ev.set_defaults(fn=cmd_rl_eval)

    dose = sub.add_parser("dose", help="radiation field").add_subparsers(
        dest="sub", required=True, parser_class=_Parser)
    pr = dose.add_parser("probe")
    pr.add_argument("--x", type=float, required=True)
    pr.add_argument("--y", type=float, required=True)
    pr.add_argument("--z", type=float, required=True)
    pr.add_argument("--source", default=None, help="source JSON (default: bundled demo)")
    pr.set_defaults(fn=cmd_dose_probe)

    ex = sub.add_parser("export", help="export historian series as CSV plus a gnuplot script")
    ex.add_argument("tags", nargs="+")
    ex.add_argument("--run", default=None, help="run directory (default runs/LATEST)")
    ex.add_argument("--t0", type=int, default=None)
    ex.add_argument("--t1", type=int, default=None)
    ex.add_argument("--out", default=None)
    ex.set_defaults(fn=cmd_export)

    det = sub.add_parser("detect", help="anomaly detectors").add_subparsers(
        dest="sub", required=True, parser_class=_Parser)
    dr = det.add_parser("run")
    dr.add_argument("--series", required=True, help="CSV with time_ms,<tag> columns")
    dr.add_argument("--column", default=None)
    dr.add_argument("--config", default=None, help="key=value detector config")
    dr.add_argument("--kind", choices=["zscore", "spectral", "both"], default="both")
    dr.add_argument("--sample-rate", type=float, default=None,
                    help="series rate for spectral (Hz); inferred from time_ms by default")
    dr.add_argument("--labels", default=None, help="labels.csv from a scenario run")
    dr.add_argument("--report", default=None, help="metrics CSV")
    dr.add_argument("--detections", default=None, help="detections CSV")
    dr.set_defaults(fn=cmd_detect_run)
    return p


def main(argv: list[str] | None = None) -> int:
    from .tagbus import TagbusError
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except KeyboardInterrupt:
        sys.stderr.write("error: interrupted\n")
        return 130
    except (CliError, TagbusError, ValueError, KeyError, OSError, RuntimeError,
            ArithmeticError) as exc:
        msg = str(exc).replace("\n", " ") or type(exc).__name__
        sys.stderr.write(f"error: {type(exc).__name__}: {msg}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
