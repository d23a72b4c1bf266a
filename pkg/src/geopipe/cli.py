"""Command-line entry point.

Exit codes: 0 success, 2 configuration error (including a missing file),
3 infeasible plan, 1 anything else such as a scheduling deadlock. Output
files are written only once every artifact has been computed.
"""
from __future__ import annotations

import argparse
import os
import sys
import tempfile

from . import bubbletea as bt
from .config import RunConfig, Scenario, load_config, policy_name
from .dc_select import SelectionInput, select, whatif
from .engine import execute
from .errors import ConfigError, Deadlock, InsufficientGpus
from .export import chrome_trace_json, tasks_csv, transfers_csv
from .metrics import report, report_csv, report_json, selection_csv
from .scheduler import ScheduleOptions, append_allreduce, make_schedule
from .workload import build_plan, resolve_compute

DEFAULT_SEED = 0


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH")
    common.add_argument("--policy", default="atlas", metavar="NAME",
                        help="gpipe, 1f1b, varuna or atlas")
    common.add_argument("--out", default=".", metavar="DIR")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, metavar="N")
    common.add_argument("--multi-conn", type=_bool, default=True, metavar="BOOL")
    common.add_argument("--recompute", type=_bool, default=True, metavar="BOOL")
    common.add_argument("--mem-limit", type=_positive_int, default=None, metavar="N")
    common.add_argument("--horizon", type=_nonneg_float, default=None, metavar="MS")
    ap = argparse.ArgumentParser(prog="geopipe", description="Geo-distributed pipeline training simulator.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "schedule, execute and report one iteration"),
                       ("select-dc", "pick the number of DP-cells and their placement"),
                       ("whatif", "run the selector over several scenarios"),
                       ("bubbletea", "fill training bubbles with prefill requests"),
                       ("trace", "write the chrome trace and CSV timelines only")):
        sub.add_parser(name, parents=[common], help=text)
    return ap


def _options(args) -> ScheduleOptions:
    return ScheduleOptions(recompute=args.recompute, multi_conn=args.multi_conn, mem_limit=args.mem_limit)


def _timeline(cfg: RunConfig, args):
    wl = cfg.workload
    plan = build_plan(cfg.topo, wl.model, wl.D or 1, wl.C, wl.dc_order, wl.tp_degree)
    dur = resolve_compute(wl.compute, wl.model, cfg.topo)
    sched = make_schedule(plan, wl.model, cfg.topo, dur, policy_name(args.policy), _options(args))
    sched = append_allreduce(sched, plan, wl.model, cfg.topo)
    return plan, execute(sched)


def _selection_input(s: Scenario, args) -> SelectionInput:
    w = s.workload
    return SelectionInput(s.topo, w.model, w.compute, w.C, None, w.dc_order, s.policy,
                          _options(args), w.tp_degree, s.label)


def cmd_simulate(cfg: RunConfig, args) -> dict[str, str]:
    _, t = _timeline(cfg, args)
    r = report(t)
    return {"metrics.csv": report_csv(r), "metrics.json": report_json(r) + "\n",
            "trace.json": chrome_trace_json(t), "tasks.csv": tasks_csv(t)}


def cmd_trace(cfg: RunConfig, args) -> dict[str, str]:
    _, t = _timeline(cfg, args)
    return {"trace.json": chrome_trace_json(t), "tasks.csv": tasks_csv(t),
            "transfers.csv": transfers_csv(t)}


def cmd_select_dc(cfg: RunConfig, args) -> dict[str, str]:
    pol = policy_name(args.policy)
    rep = select(_selection_input(Scenario("", cfg.topo, cfg.workload, pol), args))
    return {"selection.csv": selection_csv(rep)}


def cmd_whatif(cfg: RunConfig, args) -> dict[str, str]:
    scen = cfg.scenarios or [Scenario("base", cfg.topo, cfg.workload, policy_name(args.policy))]
    rows = whatif([_selection_input(s, args) for s in scen])
    lines = ["scenario,D,partitions,pp_time_ms,allreduce_time_ms,total_time_ms,throughput,chosen"]
    for r in rows:
        lines.append(f"{r.scenario},{r.D},{r.partitions},{r.pp_time_ms!r},{r.allreduce_time_ms!r},"
                     f"{r.total_time_ms!r},{r.throughput!r},{int(r.chosen)}")
    return {"whatif.csv": "\n".join(lines) + "\n"}


def _requests(cfg: RunConfig, args, horizon_ms: float) -> list[bt.PrefillRequest]:
    sec = cfg.bubbletea
    if "requests" in sec:
        path = sec["requests"]
        if not isinstance(path, str):
            raise ConfigError("bubbletea.requests", "expected a path")
        if not os.path.isabs(path):
            path = os.path.join(os.path.dirname(cfg.path) or ".", path)
        if not os.path.isfile(path):
            raise ConfigError("bubbletea.requests", f"file not found: {path}")
        with open(path, encoding="utf-8") as f:
            try:
                return bt.read_requests(f.read())
            except ValueError as e:
                raise ConfigError("bubbletea.requests", str(e)) from None
    syn = sec.get("synthetic")
    if syn is None:
        return []
    if not isinstance(syn, dict):
        raise ConfigError("bubbletea.synthetic", "expected an object")
    n = syn.get("n", 0)
    lo = syn.get("min_tokens", 64)
    if not isinstance(n, int) or n < 0:
        raise ConfigError("bubbletea.synthetic.n", "expected a non-negative integer")
    if not isinstance(lo, int) or not 1 <= lo <= bt.MAX_TOKENS:
        raise ConfigError("bubbletea.synthetic.min_tokens", f"expected an integer in 1..{bt.MAX_TOKENS}")
    return bt.synthetic_requests(n, horizon_ms, seed=args.seed, min_tokens=lo)


def cmd_bubbletea(cfg: RunConfig, args) -> dict[str, str]:
    plan, t = _timeline(cfg, args)
    horizon = args.horizon if args.horizon is not None else t.makespan_ms
    sec = cfg.bubbletea
    guard = sec.get("guard_ms", 0.0)
    if isinstance(guard, bool) or not isinstance(guard, (int, float)) or guard < 0:
        raise ConfigError("bubbletea.guard_ms", "expected a non-negative number")
    reqs = _requests(cfg, args, horizon)
    res = bt.schedule_prefills(t, reqs, bt.prefill_pipelines(plan), hidden=cfg.workload.model.hidden,
                               guard_ms=float(guard), horizon_ms=horizon)
    before = bt.utilization(t, horizon)
    after = bt.utilization(res.timeline, horizon)
    summary = ("metric,value\n"
               f"horizon_ms,{horizon!r}\nutilization_before,{before!r}\nutilization_after,{after!r}\n"
               f"accepted,{len(res.accepted)}\nrejected,{len(res.rejected)}\n")
    return {"prefill_results.csv": bt.results_csv(res), "bubbletea_summary.csv": summary,
            "trace.json": chrome_trace_json(res.timeline)}


COMMANDS = {"simulate": cmd_simulate, "select-dc": cmd_select_dc, "whatif": cmd_whatif,
            "bubbletea": cmd_bubbletea, "trace": cmd_trace}


def _write_all(out_dir: str, files: dict[str, str]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    staged = []
    try:
        for name, text in sorted(files.items()):
            fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.")
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
                f.write(text)
            staged.append((tmp, os.path.join(out_dir, name)))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, dst in staged:
        os.replace(tmp, dst)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        policy_name(args.policy, "--policy")
        cfg = load_config(args.config)
        files = COMMANDS[args.command](cfg, args)
        _write_all(args.out, files)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except InsufficientGpus as e:
        print(f"infeasible plan: {e}", file=sys.stderr)
        return 3
    except Deadlock as e:
        print(f"deadlock: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
