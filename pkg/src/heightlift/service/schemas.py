"""Request/response models for the detection service."""

from __future__ import annotations

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class SynthRequest(BaseModel):
    out_dir: str
    seed: int = 7
    count: int = Field(default=20, ge=1)
    config_path: Optional[str] = None
    config: Optional[Dict[str, Any]] = None


class SynthResponse(BaseModel):
    out_dir: str
    scene_ids: List[str]


class TrainRequest(BaseModel):
    scenes_dir: str
    out_path: str
    steps: Optional[int] = Field(default=None, ge=1)
    lr: Optional[float] = Field(default=None, gt=0)
    seed: Optional[int] = None
    config_path: Optional[str] = None
    config: Optional[Dict[str, Any]] = None


class TrainResponse(BaseModel):
    model_path: str
    steps: int
    n_scenes: int
    initial_loss: float
    final_loss: float
    last_step_loss: float


class InferRequest(BaseModel):
    scenes_dir: str
    model_path: str
    out_path: Optional[str] = None
    config_path: Optional[str] = None
    config: Optional[Dict[str, Any]] = None


class InferResponse(BaseModel):
    out_path: Optional[str]
    n_scenes: int
    n_detections: int


class EvalRequest(BaseModel):
    preds_path: str
    gts_dir: str
    iou_thr: Optional[float] = Field(default=None, gt=0, lt=1)
    classes: Optional[List[str]] = None
    out_path: Optional[str] = None
    config_path: Optional[str] = None
    config: Optional[Dict[str, Any]] = None


class EvalResponse(BaseModel):
    report: Dict[str, Any]
    out_path: Optional[str]


class RenderBevRequest(BaseModel):
    scenes_dir: str
    scene_id: Optional[str] = None
    preds_path: Optional[str] = None
    model_path: Optional[str] = None
    iou_thr: float = Field(default=0.3, gt=0, lt=1)
    config_path: Optional[str] = None
    config: Optional[Dict[str, Any]] = None
