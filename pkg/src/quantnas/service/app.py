"""HTTP facade over the engine: hardware search, rewards, and managed runs."""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse

from .. import __version__
from ..evaluator import SurrogateConfig, compute_reward, surrogate_accuracy
from ..harness import (
    ConfigError,
    RunSummary,
    export_report,
    load_run_config,
    run_hw_only,
    run_search,
)
from ..hw_model import QceCostLibrary
from ..hw_search import SearchSpaceTooLarge, Specification, solution_to_json
from ..space import network_from_json
from . import schemas


@dataclass
class _RunHandle:
    out_dir: Path
    thread: threading.Thread | None = None
    status: str = "running"
    error: str | None = None
    summary: RunSummary | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)


def _parse_network(model: schemas.NetworkModel):
    try:
        return network_from_json(model.model_dump())
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from None


def _parse_lib(model: schemas.CostLibraryModel | None) -> QceCostLibrary:
    if model is None:
        return QceCostLibrary()
    try:
        return QceCostLibrary(**model.model_dump())
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from None


def _parse_spec(model: schemas.SpecModel) -> Specification:
    try:
        return Specification(max_luts=model.rL, min_fps=model.rT, clock_hz=model.clock_hz)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from None


def create_app() -> FastAPI:
    app = FastAPI(title="quantnas", version=__version__)
    runs: dict[str, _RunHandle] = {}
    runs_lock = threading.Lock()

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse()

    def _hw(request: schemas.HwSearchRequest, oracle: bool) -> schemas.HwSearchResponse:
        network = _parse_network(request.network)
        spec = _parse_spec(request.spec)
        lib = _parse_lib(request.cost_lib)
        try:
            result = run_hw_only(network, spec, lib, oracle=oracle)
        except SearchSpaceTooLarge as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        return schemas.HwSearchResponse(
            feasible=result["feasible"],
            spec=request.spec,
            solutions=[schemas.SolutionModel(**sol) for sol in result["solutions"]],
        )

    @app.post("/hw/search", response_model=schemas.HwSearchResponse)
    def hw_search(request: schemas.HwSearchRequest):
        return _hw(request, oracle=False)

    @app.post("/hw/oracle", response_model=schemas.HwSearchResponse)
    def hw_oracle(request: schemas.HwSearchRequest):
        return _hw(request, oracle=True)

    @app.post("/surrogate", response_model=schemas.SurrogateResponse)
    def surrogate(request: schemas.SurrogateRequest):
        network = _parse_network(request.network)
        config = SurrogateConfig(**request.config.model_dump()) if request.config else SurrogateConfig()
        return schemas.SurrogateResponse(accuracy=surrogate_accuracy(network, config))

    @app.post("/reward", response_model=schemas.RewardResponse)
    def reward(request: schemas.RewardRequest):
        network = _parse_network(request.network)
        spec = _parse_spec(request.spec)
        lib = _parse_lib(request.cost_lib)
        surrogate_cfg = (
            SurrogateConfig(**request.surrogate.model_dump()) if request.surrogate else SurrogateConfig()
        )
        signal = compute_reward(
            network, spec, lambda net: surrogate_accuracy(net, surrogate_cfg), lib,
        )
        hw = None
        if signal.hw_witness is not None:
            hw = schemas.SolutionModel(**solution_to_json(network, signal.hw_witness, spec.clock_hz, lib))
        return schemas.RewardResponse(
            reward=signal.value,
            feasible=signal.feasible,
            accuracy_source=signal.accuracy_source,
            evaluator_error=signal.evaluator_error,
            hw=hw,
        )

    @app.post("/runs", response_model=schemas.RunLaunchResponse, status_code=202)
    def launch_run(request: schemas.RunLaunchRequest):
        try:
            config = load_run_config(request.model_dump(exclude_none=True))
        except ConfigError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        run_id = uuid.uuid4().hex[:12]
        handle = _RunHandle(out_dir=config.out_dir or Path("."))

        def worker():
            try:
                summary = run_search(config)
                with handle.lock:
                    handle.summary = summary
                    handle.status = "finished"
            except Exception as exc:  # surfaced through GET /runs/{id}
                with handle.lock:
                    handle.error = f"{type(exc).__name__}: {exc}"
                    handle.status = "failed"

        thread = threading.Thread(target=worker, daemon=True, name=f"quantnas-run-{run_id}")
        handle.thread = thread
        with runs_lock:
            runs[run_id] = handle
        thread.start()
        return schemas.RunLaunchResponse(run_id=run_id)

    def _get_handle(run_id: str) -> _RunHandle:
        with runs_lock:
            handle = runs.get(run_id)
        if handle is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
        return handle

    @app.get("/runs/{run_id}", response_model=schemas.RunStatusResponse)
    def run_status(run_id: str):
        handle = _get_handle(run_id)
        log = handle.out_dir / "episodes.jsonl"
        episodes_done = 0
        if log.exists():
            with open(log, "r", encoding="utf-8") as fh:
                episodes_done = sum(1 for _ in fh)
        with handle.lock:
            return schemas.RunStatusResponse(
                run_id=run_id,
                status=handle.status,
                episodes_done=episodes_done,
                best_reward=handle.summary.best_reward if handle.summary else None,
                error=handle.error,
            )

    @app.get("/runs/{run_id}/report", response_class=PlainTextResponse)
    def run_report(run_id: str):
        handle = _get_handle(run_id)
        log = handle.out_dir / "episodes.jsonl"
        if not log.exists():
            raise HTTPException(status_code=404, detail="run has no episode log yet")
        text, _ = export_report(log)
        return PlainTextResponse(text, media_type="text/csv")

    return app


app = create_app()
