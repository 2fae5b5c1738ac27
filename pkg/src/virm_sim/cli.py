"""``virm-sim`` command line: run scenarios, replay experiments, calibrate, serve."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TaskProgressColumn, TextColumn
from rich.table import Table

from .calibration import calibrate
from .callbacks import HeartbeatEvent, PhaseEvent, ProgressEvent
from .environment import EnvironmentError as EnvError
from .environment import log_startup_diagnostics, validate_environment
from .exceptions import CalibrationError, HarnessError, ScenarioValidationError
from .harness import (
    REPLAYS,
    ReplayReport,
    ScenarioRun,
    emit_metrics,
    export_scenarios,
    replay_table1,
    run_scenario,
)
from .logging_ import setup_main_logging, stop_logging
from .reference_data import COMPLETION_TARGETS
from .timing import timed
from .types import PerfParams, PilotPhase

logger = logging.getLogger(__name__)

_PARAM_REPLAYS = ("table1", "table2", "memory", "dom0", "balloon")


class RichCallback:
    """Simulation callback rendering a progress bar and pilot phase changes."""

    def __init__(self, console: Console, verbose: bool = False) -> None:
        self._console = console
        self._verbose = verbose
        self._progress: Progress | None = None
        self._task_id = None

    def on_phase(self, event: PhaseEvent) -> None:
        if not self._verbose or event.detail:
            return
        try:
            self._console.print(
                f"[dim]t={event.timestamp:>9.1f}[/dim]  {event.pilot_id}  [cyan]{event.phase}[/]"
            )
        except Exception:
            print(f"t={event.timestamp:.1f} {event.pilot_id} {event.phase}")

    def on_heartbeat(self, event: HeartbeatEvent) -> None:
        pass

    def on_progress(self, event: ProgressEvent) -> None:
        try:
            if self._progress is None:
                self._progress = Progress(
                    SpinnerColumn(),
                    TextColumn("[bold blue]{task.description}"),
                    BarColumn(),
                    TaskProgressColumn(),
                    console=self._console,
                    transient=True,
                )
                self._progress.start()
                self._task_id = self._progress.add_task(event.label, total=event.total)
            self._progress.update(self._task_id, completed=event.current)
            if event.current >= event.total:
                self.close()
        except Exception:
            print(f"{event.label}: {event.current}/{event.total}")

    def close(self) -> None:
        if self._progress is not None:
            self._progress.stop()
            self._progress = None
            self._task_id = None


def _print_run(console: Console, run: ScenarioRun) -> None:
    table = Table(title=f"Scenario {run.scenario.conf_id}")
    table.add_column("Pilot", style="cyan", no_wrap=True)
    table.add_column("Status")
    table.add_column("T_job", justify="right")
    table.add_column("T_total", justify="right")
    table.add_column("Overhead", justify="right")
    table.add_column("CPUs", justify="right")
    table.add_column("Heartbeats", justify="right")

    for m in run.metrics:
        ok = m.status == PilotPhase.DONE
        table.add_row(
            m.pilot_id,
            "[green]done[/green]" if ok else f"[red]failed[/red] {m.error or ''}",
            f"{m.t_job:.1f}s",
            f"{m.t_total:.1f}s",
            f"{m.overhead_pct:.1f}%",
            f"{m.cpu_share_avg:.2f}",
            str(m.heartbeats_sent),
        )
    console.print()
    console.print(table)
    console.print(f"  Virtual time: {run.clock:.1f}s  |  Trace events: {len(run.trace)}")
    console.print()


def _print_report(console: Console, report: ReplayReport, elapsed: float) -> None:
    table = Table(title=f"Replay {report.name}")
    for col in report.header:
        table.add_column(col, justify="left" if col == report.header[0] else "right")
    for row in report.rows:
        table.add_row(
            *(f"{row[c]:.3f}" if isinstance(row[c], float) else str(row[c]) for c in report.header)
        )
    console.print()
    console.print(table)
    for note in report.notes:
        console.print(f"  [dim]{note}[/dim]")
    console.print(f"  Wall time: {elapsed:.2f}s")
    console.print()


def _load_params(path: Path | None) -> PerfParams | None:
    if path is None:
        return None
    return PerfParams.from_dict(json.loads(path.read_text(encoding="utf-8")))


def _cmd_run(args, console: Console, callback: RichCallback) -> int:
    outputs = [p for p in (args.out, args.trace) if p is not None]
    try:
        validate_environment(scenario_path=args.scenario, output_paths=outputs)
    except EnvError as e:
        console.print("[red]Environment check failed:[/red]")
        for problem in e.problems:
            console.print(f"  [red]•[/red] {problem}")
        return 2
    try:
        run = run_scenario(args.scenario, callback=callback)
    except ScenarioValidationError as e:
        console.print(f"[red]Invalid scenario:[/red] {e}")
        return 2
    _print_run(console, run)
    if args.out is not None:
        emit_metrics(run, args.out, args.trace)
        console.print(f"  Metrics: {args.out}")
    return 0 if all(m.status == PilotPhase.DONE for m in run.metrics) else 1


def _cmd_replay(args, console: Console, callback: RichCallback, log_queue) -> int:
    params = _load_params(args.params)
    fn = REPLAYS[args.name]
    with timed(args.name) as timing:
        if fn is replay_table1:
            report = replay_table1(
                params, workers=args.workers, log_queue=log_queue, callback=callback
            )
        elif args.name in _PARAM_REPLAYS:
            report = fn(params)
        else:
            report = fn()
    _print_report(console, report, timing["elapsed"])
    if args.out is not None:
        report.write_csv(args.out)
        console.print(f"  Report: {args.out}")
    return 0


def _cmd_export(args, console: Console) -> int:
    known = [t.conf_id for t in COMPLETION_TARGETS]
    unknown = [c for c in args.conf if c not in known]
    if unknown:
        console.print(f"[red]Unknown configuration:[/red] {', '.join(unknown)}")
        console.print(f"  Known: {', '.join(known)}")
        return 2
    paths = export_scenarios(args.out_dir, args.conf or None, _load_params(args.params))
    for path in paths:
        console.print(f"  Scenario: {path}")
    return 0


def _cmd_calibrate(args, console: Console) -> int:
    result = calibrate()
    table = Table(title="Calibration residuals")
    table.add_column("Configuration", style="cyan")
    table.add_column("Published", justify="right")
    table.add_column("Model", justify="right")
    table.add_column("Residual", justify="right")
    flagged = {r.conf_id for r in result.flagged()}
    for r in result.residuals:
        style = "yellow" if r.conf_id in flagged else "green"
        table.add_row(
            r.conf_id,
            f"{r.t_paper:.0f}s",
            f"{r.t_model:.1f}s",
            f"[{style}]{r.residual_pct:+.2f}%[/{style}]",
        )
    console.print(table)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(
        json.dumps(result.params.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    console.print(f"  Parameters: {args.out}")
    if args.residuals is not None:
        result.write_residuals(args.residuals)
        console.print(f"  Residuals: {args.residuals}")
    return 0


def main(argv: list[str] | None = None) -> None:
    """Main entry point."""
    parser = argparse.ArgumentParser(
        prog="virm-sim",
        description="Simulate grid pilots running jobs in Xen sandboxes managed by VIRM",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  virm-sim export-scenario --out-dir scenarios  # Write the named configurations
  virm-sim run scenarios/conf_9.json            # Simulate a scenario
  virm-sim run scenarios/conf_9.json --out m.csv --trace t.jsonl
  virm-sim replay table1                        # Calibrate, then compare completion times
  virm-sim replay table1 --params params.json -w 4
  virm-sim replay balloon                       # Balloon grants with and without a cap
  virm-sim calibrate --out params.json          # Fit and save model constants
  virm-sim serve --port 18700                   # Run the VIRM service
        """,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Verbose logging")
    parser.add_argument("--log-dir", type=Path, default=None, help="Write virm.log here")
    parser.add_argument("--no-color", action="store_true", help="Disable colored output")
    parser.add_argument("--version", action="version", version="virm-sim 0.1.0")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Simulate a scenario file")
    run.add_argument("scenario", type=Path)
    run.add_argument("--out", type=Path, default=None, help="Metrics CSV")
    run.add_argument("--trace", type=Path, default=None, help="Trace JSON-lines")

    replay = sub.add_parser("replay", help="Replay a published experiment")
    replay.add_argument("name", choices=sorted(REPLAYS))
    replay.add_argument("--params", type=Path, default=None, help="PerfParams JSON")
    replay.add_argument("--out", type=Path, default=None, help="Report CSV")
    replay.add_argument(
        "-w", "--workers", type=int, default=1, help="Process pool size for table1 (default: 1)"
    )

    cal = sub.add_parser("calibrate", help="Fit model constants to the published times")
    cal.add_argument("--out", type=Path, required=True, help="PerfParams JSON to write")
    cal.add_argument("--residuals", type=Path, default=None, help="Residual CSV")

    export = sub.add_parser("export-scenario", help="Write named configurations as scenario files")
    export.add_argument(
        "conf", nargs="*", metavar="CONF", help="Configurations to write (default: all)"
    )
    export.add_argument("--out-dir", type=Path, default=Path("scenarios"), help="Target directory")
    export.add_argument("--params", type=Path, default=None, help="PerfParams JSON")

    sub.add_parser("serve", help="Run the VIRM service (see virm-service --help)", add_help=False)

    args, rest = parser.parse_known_args(argv)
    if args.command == "serve":
        from .server import main as serve_main

        serve_main(rest)
        return
    if rest:
        parser.error(f"unrecognized arguments: {' '.join(rest)}")

    no_color = args.no_color or os.environ.get("NO_COLOR") is not None
    console = Console(no_color=no_color)
    log_queue, listener = setup_main_logging(args.log_dir, args.verbose)
    callback = RichCallback(console, args.verbose)
    try:
        if args.verbose:
            log_startup_diagnostics(command=args.command)
        if args.command == "run":
            code = _cmd_run(args, console, callback)
        elif args.command == "replay":
            code = _cmd_replay(args, console, callback, log_queue)
        elif args.command == "export-scenario":
            code = _cmd_export(args, console)
        else:
            code = _cmd_calibrate(args, console)
    except KeyboardInterrupt:
        console.print("\n[yellow]Interrupted[/yellow]")
        code = 130
    except (CalibrationError, HarnessError, OSError, ValueError) as e:
        console.print(f"[red]Error:[/red] {e}")
        code = 1
    finally:
        callback.close()
        stop_logging(listener)
    sys.exit(code)


if __name__ == "__main__":
    main()
