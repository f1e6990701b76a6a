"""FastAPI service wrapping the detection pipeline.

Endpoints are thin adapters: they resolve the effective configuration
(defaults, then an optional config file, then inline overrides), call into
:mod:`heightlift.pipeline`, and map package errors to HTTP 400 responses
with ``{"kind": "data"}`` so clients can distinguish data problems from
request-validation failures (FastAPI's 422).
"""

from __future__ import annotations

import os

from fastapi import FastAPI, HTTPException
from fastapi.responses import Response

from .. import kitti_io, pipeline
from ..config import load_config
from ..errors import HeightLiftError
from . import schemas

VERSION = "0.1.0"
PPM_MEDIA_TYPE = "image/x-portable-pixmap"


def _resolve_config(config_path, overrides):
    try:
        return load_config(config_path, overrides)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=400,
                            detail={"kind": "data", "message": str(exc)}) from None
    except HeightLiftError as exc:
        raise HTTPException(status_code=400,
                            detail={"kind": "data", "message": str(exc)}) from None


def _data_error(exc):
    return HTTPException(status_code=400, detail={"kind": "data", "message": str(exc)})


def create_app():
    app = FastAPI(title="heightlift", version=VERSION)

    @app.get("/v1/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=VERSION)

    @app.post("/v1/synth", response_model=schemas.SynthResponse)
    def synth(req: schemas.SynthRequest):
        cfg = _resolve_config(req.config_path, req.config)
        try:
            ids = pipeline.synthesize(cfg, req.out_dir, req.seed, req.count)
        except (HeightLiftError, OSError) as exc:
            raise _data_error(exc) from None
        return schemas.SynthResponse(out_dir=req.out_dir, scene_ids=ids)

    @app.post("/v1/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        cfg = _resolve_config(req.config_path, req.config)
        try:
            stats = pipeline.train(cfg, req.scenes_dir, req.out_path,
                                   steps=req.steps, lr=req.lr, seed=req.seed)
        except (HeightLiftError, OSError) as exc:
            raise _data_error(exc) from None
        return schemas.TrainResponse(
            model_path=stats["model_path"], steps=stats["steps"],
            n_scenes=stats["n_scenes"], initial_loss=stats["initial_loss"],
            final_loss=stats["final_loss"], last_step_loss=stats["last_step_loss"])

    @app.post("/v1/infer", response_model=schemas.InferResponse)
    def infer(req: schemas.InferRequest):
        cfg = _resolve_config(req.config_path, req.config)
        try:
            results, n_dets = pipeline.infer(cfg, req.scenes_dir, req.model_path,
                                             out_path=req.out_path)
        except (HeightLiftError, OSError) as exc:
            raise _data_error(exc) from None
        return schemas.InferResponse(out_path=req.out_path, n_scenes=len(results),
                                     n_detections=n_dets)

    @app.post("/v1/eval", response_model=schemas.EvalResponse)
    def evaluate(req: schemas.EvalRequest):
        cfg = _resolve_config(req.config_path, req.config)
        try:
            report = pipeline.evaluate(cfg, req.preds_path, req.gts_dir,
                                       iou_thr=req.iou_thr, classes=req.classes)
            if req.out_path:
                os.makedirs(os.path.dirname(os.path.abspath(req.out_path)), exist_ok=True)
                with open(req.out_path, "w") as fh:
                    fh.write(kitti_io.serialize_report(report))
        except (HeightLiftError, OSError) as exc:
            raise _data_error(exc) from None
        return schemas.EvalResponse(report=report, out_path=req.out_path)

    @app.post("/v1/render-bev")
    def render_bev(req: schemas.RenderBevRequest):
        cfg = _resolve_config(req.config_path, req.config)
        try:
            payload = pipeline.render_scene_bev(
                cfg, req.scenes_dir, scene_id=req.scene_id,
                preds_path=req.preds_path, model_path=req.model_path,
                iou_thr=req.iou_thr)
        except (HeightLiftError, OSError) as exc:
            raise _data_error(exc) from None
        return Response(content=payload, media_type=PPM_MEDIA_TYPE)

    return app


app = create_app()
