"""Request/response models of the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class HealthResponse(StrictModel):
    status: str = "ok"


class LayerModel(StrictModel):
    n: int = Field(..., ge=1, description="number of filters")
    fh: int = Field(..., ge=1)
    fw: int = Field(..., ge=1)
    sh: int = Field(..., ge=1)
    sw: int = Field(..., ge=1)
    ps: int = Field(..., ge=1)
    ai: int = Field(..., ge=0, description="activation integer bits")
    af: int = Field(..., ge=0)
    wi: int = Field(..., ge=0)
    wf: int = Field(..., ge=0)


class NetworkInputModel(StrictModel):
    channels: int = 3
    rows: int = 32
    cols: int = 32
    ai0: int = 0
    af0: int = 8


class NetworkModel(StrictModel):
    layers: list[LayerModel] = Field(..., min_length=1)
    input: NetworkInputModel = NetworkInputModel()


class SpecModel(StrictModel):
    rL: int = Field(..., ge=1, description="maximum LUTs")
    rT: float = Field(..., gt=0, description="minimum throughput, frames/s")
    clock_hz: float = Field(100_000_000.0, gt=0)


class CostLibraryModel(StrictModel):
    mult_coeff: float = 0.6
    adder_coeff: float = 1.0
    trunc_coeff: float = 2.0
    fixed_overhead: float = 300.0


class TileModel(StrictModel):
    tn: int
    tm: int


class SolutionModel(StrictModel):
    partitions: list[list[int]]
    tiles: list[TileModel]
    lut: int
    latency_cycles: int
    throughput_fps: float


class HwSearchRequest(StrictModel):
    network: NetworkModel
    spec: SpecModel
    cost_lib: CostLibraryModel | None = None


class HwSearchResponse(StrictModel):
    feasible: bool
    spec: SpecModel
    solutions: list[SolutionModel]


class SurrogateConfigModel(StrictModel):
    acc_floor: float = 0.10
    acc_ceiling_span: float = 0.80
    param_ref: int = 500_000


class SurrogateRequest(StrictModel):
    network: NetworkModel
    config: SurrogateConfigModel | None = None


class SurrogateResponse(StrictModel):
    accuracy: float


class RewardRequest(StrictModel):
    network: NetworkModel
    spec: SpecModel
    cost_lib: CostLibraryModel | None = None
    surrogate: SurrogateConfigModel | None = None


class RewardResponse(StrictModel):
    reward: float
    feasible: bool
    accuracy_source: str
    evaluator_error: str | None = None
    hw: SolutionModel | None = None


class RunLaunchRequest(StrictModel):
    """Top level of the run-config schema; nested sections are validated by the core loader."""

    mode: str
    episodes: int = 0
    seed: int = 0
    out_dir: str
    space: dict = Field(default_factory=dict)
    spec: dict
    controller: dict = Field(default_factory=dict)
    evaluator: dict = Field(default_factory=lambda: {"kind": "surrogate"})
    cost_lib: dict | None = None
    cost_lib_path: str | None = None
    fixed_network: dict | None = None
    checkpoint_interval: int = 10


class RunLaunchResponse(StrictModel):
    run_id: str


class RunStatusResponse(StrictModel):
    run_id: str
    status: str  # "running" | "finished" | "failed"
    episodes_done: int
    best_reward: float | None = None
    error: str | None = None
