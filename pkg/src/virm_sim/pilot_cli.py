"""``pilot`` command: run one job from a scenario file, sandboxed if VIRM answers."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .callbacks import LoggingCallback
from .client import DEFAULT_URL, HttpVirmClient, RemoteClock
from .clock import VirtualClock
from .exceptions import ScenarioValidationError
from .pilot import Pilot, PilotConfig, detect_virm, drive
from .scenario import load_scenario
from .types import PilotMode, PilotPhase

logger = logging.getLogger(__name__)

EXIT_DONE = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pilot",
        description="Run a single job the way a grid pilot would",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  pilot run --scenario scenarios/conf_2.json --job Conf_2-job1
  pilot run --scenario scenarios/conf_2.json --job Conf_2-job1 --virm http://127.0.0.1:18800
  pilot run --scenario scenarios/conf_2.json --job Conf_2-job1 --direct --status-log status.jsonl
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="Run one job")
    run.add_argument("--scenario", type=Path, required=True, help="Scenario JSON file")
    run.add_argument("--job", required=True, help="job_id of the job to run")
    run.add_argument("--virm", default=DEFAULT_URL, help=f"VIRM endpoint (default: {DEFAULT_URL})")
    run.add_argument("--direct", action="store_true", help="Skip VIRM detection, run on the host")
    run.add_argument("--status-log", type=Path, default=None, help="Write the status log here")
    run.add_argument("--workdir", type=Path, default=None, help="Create the job layout here")
    run.add_argument("-v", "--verbose", action="store_true", help="Verbose logging")
    return parser


def main(argv: list[str] | None = None) -> None:
    """Main entry point. Exits 0 when the pilot ends DONE, 1 on FAILED, 2 on bad input."""
    args = _build_parser().parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s | %(levelname)s | %(message)s",
        datefmt="%H:%M:%S",
    )

    try:
        scenario = load_scenario(args.scenario)
    except ScenarioValidationError as e:
        logger.error("%s", e)
        sys.exit(EXIT_CONFIG)

    index = next((i for i, job in enumerate(scenario.jobs) if job.job_id == args.job), None)
    if index is None:
        known = ", ".join(job.job_id for job in scenario.jobs)
        logger.error("No job %r in %s (known: %s)", args.job, args.scenario, known)
        sys.exit(EXIT_CONFIG)
    job = scenario.jobs[index]
    domain = scenario.domains[index] if index < len(scenario.domains) else None

    config = PilotConfig(
        virm_url=args.virm,
        workdir=args.workdir,
        force_direct=args.direct,
        image_id=scenario.image_id,
        volume_size=scenario.volume_size,
    )

    client = None
    mode = PilotMode.DIRECT
    if not args.direct:
        mode = detect_virm(args.virm, config.probe_timeout)
    if mode == PilotMode.VIRTUALIZED:
        client = HttpVirmClient(args.virm)
        clock = RemoteClock(client)
    else:
        clock = VirtualClock()

    pilot = Pilot(
        job,
        domain,
        client=client,
        clock=clock,
        machine=scenario.machine,
        params=scenario.perf_params,
        heartbeat=scenario.heartbeat,
        config=config,
        callback=LoggingCallback(),
    )
    try:
        report = drive(pilot, clock.advance)
    finally:
        if client is not None:
            client.close()

    if args.status_log is not None:
        report.write_status_log(args.status_log)

    print(
        json.dumps(
            {
                "job_id": job.job_id,
                "status": str(report.status),
                "mode": str(report.state.mode),
                "t_total": round(report.t_total, 3),
                "t_job": round(report.t_job, 3),
                "heartbeats": len(report.heartbeats),
                "error": report.error,
            },
            sort_keys=True,
        )
    )
    sys.exit(EXIT_DONE if report.status == PilotPhase.DONE else EXIT_FAILED)


if __name__ == "__main__":
    main()
