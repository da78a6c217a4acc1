"""FastAPI application exposing each pipeline command as an endpoint.

Error mapping: configuration problems are 400, runtime composition errors
are 422, both with a JSON body naming the error class.  The service is a
thin shell; all behavior lives in the runners.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, runners
from ..errors import ComposeError, ConfigurationError
from . import schemas


def create_app() -> FastAPI:
    app = FastAPI(title="diffcompose", version=__version__)

    @app.exception_handler(ComposeError)
    async def _compose_error(request: Request, exc: ComposeError):
        status = 400 if isinstance(exc, ConfigurationError) else 422
        body = schemas.ErrorBody(error=type(exc).__name__, message=str(exc))
        return JSONResponse(status_code=status, content=body.model_dump())

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/v1/remove", response_model=schemas.RemoveResponse)
    def remove(req: schemas.RemoveRequest) -> schemas.RemoveResponse:
        return runners.run_remove(req)

    @app.post("/v1/paste", response_model=schemas.PasteResponse)
    def paste(req: schemas.PasteRequest) -> schemas.PasteResponse:
        return runners.run_paste(req)

    @app.post("/v1/harmonize", response_model=schemas.HarmonizeResponse)
    def harmonize(req: schemas.HarmonizeRequest) -> schemas.HarmonizeResponse:
        return runners.run_harmonize(req)

    @app.post("/v1/compose", response_model=schemas.ComposeResponse)
    def compose(req: schemas.ComposeRequest) -> schemas.ComposeResponse:
        return runners.run_compose(req)

    @app.post("/v1/pipeline", response_model=schemas.PipelineResponse)
    def pipeline(req: schemas.PipelineRequest) -> schemas.PipelineResponse:
        return runners.run_pipeline_cmd(req)

    @app.post("/v1/diagnose", response_model=schemas.DiagnoseResponse)
    def diagnose(req: schemas.DiagnoseRequest) -> schemas.DiagnoseResponse:
        return runners.run_diagnose(req)

    @app.post("/v1/config/resolve",
              response_model=schemas.ResolveConfigResponse)
    def resolve(req: schemas.ResolveConfigRequest) -> schemas.ResolveConfigResponse:
        return runners.run_resolve(req)

    return app
