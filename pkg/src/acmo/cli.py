"""Thin command-line client for the experiment service.

By default requests are routed to the FastAPI app in-process (ASGI
transport, no socket); pass ``--server`` or set ``ACMO_SERVER`` to talk to
a remote instance started with ``acmo serve``.

Exit codes: 0 success, 1 a bound report was violated, 2 config or usage
error, 3 a trajectory diverged.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import httpx

from acmo.config import ENV_SEED

EXIT_OK = 0
EXIT_VIOLATED = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3

ENV_SERVER = "ACMO_SERVER"


class CliExit(SystemExit):
    """Early exit carrying a CLI exit code; message goes to stderr."""

    def __init__(self, code: int, message: str):
        print(message, file=sys.stderr)
        super().__init__(code)


def _client(server: Optional[str]) -> httpx.Client:
    server = server or os.environ.get(ENV_SERVER)
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    # in-process default: drive the ASGI app through the sync test bridge
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from acmo.service import app  # imported lazily: keeps --help fast

    return TestClient(app, raise_server_exceptions=True)


def _load_config_payload(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise CliExit(EXIT_CONFIG, f"cannot read config {path!r}: {exc}")
    except json.JSONDecodeError as exc:
        raise CliExit(
            EXIT_CONFIG,
            f"malformed JSON in {path!r} at line {exc.lineno}, column {exc.colno}: {exc.msg}",
        )
    if not isinstance(data, dict):
        raise CliExit(EXIT_CONFIG, "config root must be a JSON object")
    env_seed = os.environ.get(ENV_SEED)
    if env_seed:
        try:
            data["seed"] = int(env_seed)
        except ValueError:
            raise CliExit(EXIT_CONFIG, f"{ENV_SEED} must be an integer, got {env_seed!r}")
    return data


def _print_reports(payload: dict) -> None:
    for report in payload.get("reports", []):
        tag = "VIOLATED" if report["violated"] else "ok"
        print(
            f"[{tag}] {report['name']}: worst_slack={report['worst_slack']:.6g} "
            f"n_steps={report['n_steps']}"
        )


def _finish_run(payload: dict) -> int:
    status = payload["status"]
    if status == "divergence":
        print(f"divergence: {payload.get('detail', '')}", file=sys.stderr)
        return EXIT_DIVERGENCE
    _print_reports(payload)
    agg = payload.get("aggregate") or {}
    if agg:
        print(
            f"final_loss mean={agg.get('final_loss_mean'):.6g} "
            f"std={agg.get('final_loss_std'):.6g} "
            f"trials={len(payload.get('trials', []))} "
            f"config_hash={payload.get('config_hash', '')[:12]}"
        )
    if payload.get("summary_path"):
        print(f"summary: {payload['summary_path']}")
    return EXIT_VIOLATED if status == "violated" else EXIT_OK


def _post(client: httpx.Client, endpoint: str, payload: dict) -> dict | int:
    response = client.post(endpoint, json=payload)
    if response.status_code in (400, 422):
        detail = response.json().get("detail")
        print(f"config error: {detail}", file=sys.stderr)
        return EXIT_CONFIG
    response.raise_for_status()
    return response.json()


def cmd_run(args: argparse.Namespace, endpoint: str) -> int:
    payload = _load_config_payload(args.config)
    with _client(args.server) as client:
        out = _post(client, endpoint, payload)
    if isinstance(out, int):
        return out
    return _finish_run(out)


def cmd_sweep(args: argparse.Namespace) -> int:
    payload = _load_config_payload(args.config)
    with _client(args.server) as client:
        out = _post(client, "/sweep", payload)
    if isinstance(out, int):
        return out
    if out["status"] == "divergence":
        print(f"divergence: {out.get('detail', '')}", file=sys.stderr)
        return EXIT_DIVERGENCE
    for row in out["rows"]:
        print(f"[{row['status']}] {row['overrides']} final_loss={row['final_loss_mean']:.6g}")
    if out.get("summary_path"):
        print(f"summary: {out['summary_path']}")
    return EXIT_VIOLATED if out["status"] == "violated" else EXIT_OK


def cmd_list(args: argparse.Namespace) -> int:
    with _client(args.server) as client:
        response = client.get("/registries")
        response.raise_for_status()
        data = response.json()
    for section in ("optimizers", "problems", "checks", "alpha_kinds", "schedule_modes"):
        print(f"{section}: {' '.join(data[section])}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("acmo.service:app", host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="acmo",
        description="Run and verify stochastic-optimization experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_command(name: str, help_text: str):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to a JSON experiment config")
        p.add_argument("--server", default=None,
                       help="service URL (default: in-process)")
        return p

    add_config_command("run", "run trials, checks, and emit CSV/JSON artifacts")
    add_config_command("verify", "run diagnostics only (no artifacts)")
    add_config_command("sweep", "run the config's hyperparameter grid")

    p_list = sub.add_parser("list", help="print registry names")
    p_list.add_argument("--server", default=None)

    p_serve = sub.add_parser("serve", help="start the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8321)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args, "/run")
        if args.command == "verify":
            return cmd_run(args, "/verify")
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "list":
            return cmd_list(args)
        if args.command == "serve":
            return cmd_serve(args)
    except CliExit as exc:
        return int(exc.code)
    except httpx.HTTPError as exc:
        print(f"service error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    parser.error(f"unknown command {args.command!r}")
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
