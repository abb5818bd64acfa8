"""Command-line interface.

Each subcommand reads a JSON config, runs the matching command (in-process,
or on a running service with ``--server URL``) and writes a JSON report, any
CSV tables and ``manifest.json`` into ``--out``.

Exit codes: 0 success, 1 config error, 2 solver infeasible, 3 verification
failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .api import COMMANDS, RunOptions, run_command
from .errors import ConfigError, SolverInfeasible, SwitchLQError
from .model import config_hash

log = logging.getLogger("switchlq")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_VERIFY = 0, 1, 2, 3


def _default_threads() -> int:
    env = os.environ.get("SWITCHLQ_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise SystemExit(f"SWITCHLQ_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="switchlq", description="Regime-switching mean-field LQ solver")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", type=Path, help="JSON problem config")
        sp.add_argument("--tol", type=float, default=1e-9)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--paths", type=int, default=10_000)
        sp.add_argument("--horizon", type=float, default=None, help="simulation horizon after s")
        sp.add_argument("--dt", type=float, default=1e-3)
        sp.add_argument("--step", type=float, default=1e-2, help="adjoint RK4 step")
        sp.add_argument("--method", choices=("horizon", "newton"), default="horizon")
        sp.add_argument("--dump", type=int, default=10, help="number of paths written by simulate")
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--out", type=Path, default=Path("out"))
        sp.add_argument("--server", default=None, help="base URL of a running service")
        sp.add_argument("-v", "--verbose", action="store_true")
    sv = sub.add_parser("serve", help="run the HTTP service (needs uvicorn)")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8000)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_table(path: Path, table: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(table["header"])
        for row in table["rows"]:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def _remote(url: str, command: str, cfg: dict, opts: RunOptions) -> tuple[dict, int]:
    import httpx

    body = {"config": cfg, "options": opts.__dict__}
    try:
        r = httpx.post(url.rstrip("/") + "/" + command, json=body, timeout=None)
    except httpx.HTTPError as exc:
        raise SystemExit(f"cannot reach service: {exc}") from None
    data = r.json()
    if r.status_code == 200:
        return data, int(data.get("exit_code", 0))
    if "exit_code" in data:
        print(f"{data['error']}: {data['message']}", file=sys.stderr)
        return {}, int(data["exit_code"])
    # request validation failures from the service
    print(f"invalid config: {data.get('detail')}", file=sys.stderr)
    return {}, EXIT_CONFIG


def _local(command: str, cfg: dict, opts: RunOptions) -> tuple[dict, int]:
    try:
        res = run_command(command, cfg, opts)
    except ConfigError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return {}, EXIT_CONFIG
    except SolverInfeasible as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return {}, EXIT_INFEASIBLE
    code = EXIT_OK
    if res.passed is False:
        code = EXIT_VERIFY if command == "verify" else EXIT_INFEASIBLE
    return res.to_dict(), code


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn

        uvicorn.run("switchlq.service:app", host=args.host, port=args.port)
        return EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = json.loads(args.config.read_text())
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        threads = args.threads if args.threads is not None else _default_threads()
        opts = RunOptions(tol=args.tol, seed=args.seed, paths=args.paths, horizon=args.horizon, dt=args.dt,
                          threads=threads, method=args.method, step=args.step, n_dump=args.dump)
    except (OSError, json.JSONDecodeError, SwitchLQError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.server:
        result, code = _remote(args.server, args.command, cfg, opts)
    else:
        result, code = _local(args.command, cfg, opts)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    stem = args.command.replace("-", "_")
    files = []
    if result:
        _write_json(out / f"{stem}.json", result["report"])
        files.append(f"{stem}.json")
        for name, table in sorted(result.get("tables", {}).items()):
            _write_table(out / f"{stem}_{name}.csv", table)
            files.append(f"{stem}_{name}.csv")
    manifest = {
        "command": args.command,
        "config_path": str(args.config),
        "config_sha256": config_hash(cfg),
        "options": opts.__dict__,
        "output_dir": str(out),
        "files": files,
        "exit_code": code,
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    _write_json(out / "manifest.json", manifest)
    if result:
        print(json.dumps({"command": args.command, "exit_code": code, "passed": result.get("passed"),
                          "report": str(out / f"{stem}.json")}, sort_keys=True))
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
