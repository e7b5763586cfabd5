#!/usr/bin/env python3
"""
fedfraud Coordinator - FastAPI Application
HTTP surface of the federated coordinator: registration, model polling,
update submission, status and metrics.
"""

import logging
from datetime import datetime
from typing import Any, Dict, Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from config import LedgerManager, ServerConfig
from fedfraud import __version__
from fedfraud.coordinator import Coordinator
from fedfraud.data_pipeline import ProcessedDataset
from fedfraud.errors import UpdateRejected
from fedfraud.i18n import detect_locale, t

logger = logging.getLogger(__name__)


# Pydantic Models
class RegisterRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    client_id: str = Field(min_length=1, max_length=128)


class LocalMetrics(BaseModel):
    model_config = ConfigDict(extra="forbid")

    round: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    loss: float = 0.0


class UpdateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    client_id: str = Field(min_length=1, max_length=128)
    round: int
    n_samples: int
    params: Dict[str, Any]
    local_metrics: LocalMetrics


class CoordinatorApp:
    """Coordinator application."""

    def __init__(self, config: ServerConfig, validation: ProcessedDataset,
                 ledger: Optional[LedgerManager] = None):
        self.config = config
        if ledger is None and config.ledger_path:
            ledger = LedgerManager(config.ledger_path)
        self.coordinator = Coordinator(config, validation, ledger)
        self.app = self.create_app()

    def _locale(self, request: Request) -> str:
        """Detect locale from request Accept-Language header."""
        return detect_locale(request.headers.get("accept-language"))

    def _rejection(self, request: Request, reason: str, status_code: int, **context) -> JSONResponse:
        context.setdefault("current", self.coordinator.state.round)
        context.setdefault("count", self.config.client_count)
        return JSONResponse(
            status_code=status_code,
            content={
                "accepted": False,
                "reason": reason,
                "message": t(reason, self._locale(request), **context),
            },
        )

    def create_app(self) -> FastAPI:
        """Create the FastAPI application."""
        app = FastAPI(
            title="fedfraud coordinator",
            description="Federated fraud-detection coordinator",
            version=__version__,
            docs_url="/api/docs",
            redoc_url="/api/redoc"
        )

        if self.config.allow_cors:
            app.add_middleware(
                CORSMiddleware,
                allow_origins=list(self.config.cors_origins),
                allow_methods=["*"],
                allow_headers=["*"],
            )

        @app.exception_handler(RequestValidationError)
        async def malformed_request(request: Request, exc: RequestValidationError):
            logger.warning("Malformed request to %s: %s", request.url.path, exc.errors())
            return self._rejection(request, "malformed_request", 400)

        self.setup_routes(app)

        return app

    def setup_routes(self, app: FastAPI):
        """Set up all API routes."""

        # Handlers that touch the round state are sync so they run in the
        # threadpool; the coordinator lock serializes them.

        @app.get("/api/health")
        async def health_check():
            """Health check endpoint."""
            return {
                "status": "healthy",
                "service": "fedfraud-coordinator",
                "version": __version__,
                "port": self.config.port,
                "round": self.coordinator.state.round,
                "timestamp": datetime.now().isoformat()
            }

        @app.post("/api/v1/register")
        def register(body: RegisterRequest, request: Request):
            """Register a client and return the shared configuration."""
            try:
                accepted = self.coordinator.register(body.client_id)
                accepted["message"] = t("client_registered", self._locale(request), client_id=body.client_id)
                return accepted

            except UpdateRejected as e:
                return self._rejection(request, e.reason, e.status_code, client_id=body.client_id)
            except Exception as e:
                logger.exception("register failed")
                raise HTTPException(status_code=500, detail=str(e))

        @app.get("/api/v1/model")
        def get_model(client_id: Optional[str] = None):
            """Current global model; clients poll this to detect a new round."""
            try:
                return self.coordinator.model(client_id)

            except Exception as e:
                logger.exception("model poll failed")
                raise HTTPException(status_code=500, detail=str(e))

        @app.post("/api/v1/update")
        def post_update(body: UpdateRequest, request: Request):
            """Submit one client update for the current round."""
            locale = self._locale(request)
            try:
                ack = self.coordinator.submit(
                    body.client_id,
                    body.round,
                    body.n_samples,
                    body.params,
                    body.local_metrics.model_dump(),
                )
                if ack["aggregated"]:
                    ack["message"] = t("round_aggregated", locale, round=body.round,
                                       new_round=ack["current_round"])
                else:
                    ack["message"] = t("update_accepted", locale, round=body.round)
                return ack

            except UpdateRejected as e:
                logger.info("Rejected update from %s: %s", body.client_id, e)
                return self._rejection(request, e.reason, e.status_code,
                                       client_id=body.client_id, round=body.round)
            except Exception:
                logger.exception("update failed")
                return self._rejection(request, "internal_error", 500)

        @app.get("/api/v1/status")
        def get_status():
            """Round, update count and per-client status."""
            try:
                return self.coordinator.status()

            except Exception as e:
                raise HTTPException(status_code=500, detail=str(e))

        @app.get("/api/v1/metrics")
        def get_metrics():
            """Validation metrics after each aggregation."""
            try:
                return self.coordinator.metrics()

            except Exception as e:
                raise HTTPException(status_code=500, detail=str(e))

    def run(self):
        """Start the coordinator server."""
        import uvicorn

        print(f"fedfraud coordinator starting on http://{self.config.host}:{self.config.port}")
        print(f"Waiting for {self.config.client_count} clients, "
              f"up to {self.config.federation.max_rounds} rounds")

        uvicorn.run(
            self.app,
            host=self.config.host,
            port=self.config.port,
            log_level=self.config.log_level
        )
