"""FastAPI application; one POST endpoint per command."""
from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..api import RunOptions, run_command
from ..errors import ConfigError, SolverInfeasible, SwitchLQError
from .schemas import CommandRequest, CommandResponse, ErrorResponse, Health

ROUTES = {
    "/check-stability": "check-stability",
    "/solve-are": "solve-are",
    "/solve-bsde": "solve-bsde",
    "/synthesize": "synthesize",
    "/simulate": "simulate",
    "/verify": "verify",
}


def exit_code_for(exc: Exception) -> int:
    if isinstance(exc, ConfigError):
        return 1
    if isinstance(exc, SolverInfeasible):
        return 2
    return 1


def _execute(command: str, req: CommandRequest) -> CommandResponse:
    opts = RunOptions(**req.options.model_dump())
    res = run_command(command, req.config.to_config(), opts)
    code = 3 if res.passed is False and command == "verify" else 0
    if command == "check-stability" and res.passed is False:
        code = 2
    return CommandResponse(command=command, report=res.report, tables=res.tables, passed=res.passed, exit_code=code)


def _handler(command: str):
    def handler(req: CommandRequest) -> CommandResponse:
        return _execute(command, req)

    return handler


def create_app() -> FastAPI:
    app = FastAPI(title="switchlq", version=__version__)

    @app.exception_handler(SwitchLQError)
    async def _lib_error(request: Request, exc: SwitchLQError):
        code = exit_code_for(exc)
        body = ErrorResponse(error=type(exc).__name__, message=str(exc), exit_code=code)
        return JSONResponse(status_code=422 if code == 1 else 409, content=body.model_dump())

    @app.get("/health", response_model=Health)
    def health():
        return Health(status="ok", version=__version__)

    # numerical work is CPU bound, so plain (threadpool) handlers are used
    for path, command in ROUTES.items():
        app.add_api_route(path, _handler(command), methods=["POST"], response_model=CommandResponse,
                          responses={409: {"model": ErrorResponse}, 422: {"model": ErrorResponse}},
                          name=command)
    return app


app = create_app()
