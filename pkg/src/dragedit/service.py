"""HTTP job service: the API the annotation UI drives.

Versioned under /v1. Long-running stages (LoRA training, the drag run)
execute as asynchronous jobs with per-project mutual exclusion; job
submission is idempotent per (project, stage, config-hash). Errors use the
envelope {"code", "stage", "message"}.
"""

from __future__ import annotations

import json
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse, PlainTextResponse, Response

from .codec import DEFAULT_FPS
from .errors import ConfigError, DragEditError, InstructionError, StageError
from .pipeline import Project, RunConfig, preprocess, propagate, run_full, set_instruction, train_lora_stage

DEFAULT_WORKERS = 2


@dataclass
class Job:
    job_id: str
    project_id: str
    stage: str
    config_hash: str
    status: str = "queued"  # queued | running | done | failed
    error: dict | None = None
    result: dict | None = None

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "project_id": self.project_id,
            "stage": self.stage,
            "status": self.status,
            "error": self.error,
            "result": self.result,
        }


class JobRegistry:
    """In-memory job table with per-project locks and idempotency keys."""

    def __init__(self, workers: int = DEFAULT_WORKERS):
        self.jobs: dict[str, Job] = {}
        self.by_key: dict[tuple[str, str, str], str] = {}
        self.project_locks: dict[str, threading.Lock] = {}
        self.pool = ThreadPoolExecutor(max_workers=workers)
        self.mutex = threading.Lock()

    def lock_for(self, project_id: str) -> threading.Lock:
        with self.mutex:
            return self.project_locks.setdefault(project_id, threading.Lock())

    def submit(self, project_id: str, stage: str, config_hash: str, work) -> Job:
        key = (project_id, stage, config_hash)
        with self.mutex:
            existing = self.by_key.get(key)
            if existing is not None:
                return self.jobs[existing]
            job = Job(uuid.uuid4().hex[:12], project_id, stage, config_hash)
            self.jobs[job.job_id] = job
            self.by_key[key] = job.job_id

        def runner():
            lock = self.lock_for(project_id)
            with lock:
                job.status = "running"
                try:
                    job.result = work()
                    job.status = "done"
                except StageError as exc:
                    job.status = "failed"
                    job.error = {"code": "stage_failed", "stage": exc.stage, "message": str(exc)}
                except DragEditError as exc:
                    job.status = "failed"
                    job.error = {"code": "failed", "stage": stage, "message": str(exc)}
                except Exception as exc:  # pragma: no cover - defensive
                    job.status = "failed"
                    job.error = {"code": "internal", "stage": stage, "message": str(exc)}

        self.pool.submit(runner)
        return job

    def get(self, job_id: str) -> Job | None:
        return self.jobs.get(job_id)


def _error(status_code: int, code: str, stage: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status_code,
                        content={"code": code, "stage": stage, "message": message})


def create_app(data_root: Path, workers: int = DEFAULT_WORKERS) -> FastAPI:
    data_root = Path(data_root)
    data_root.mkdir(parents=True, exist_ok=True)
    app = FastAPI(title="dragedit", version="1")
    registry = JobRegistry(workers=workers)
    app.state.registry = registry
    app.state.data_root = data_root

    def load_project(project_id: str) -> Project:
        return Project.load(data_root, project_id)

    @app.exception_handler(DragEditError)
    async def on_engine_error(request: Request, exc: DragEditError):
        if isinstance(exc, StageError):
            return _error(409, "ordering" if "status" in str(exc) else "stage_failed", exc.stage, str(exc))
        if isinstance(exc, (InstructionError, ConfigError)):
            return _error(422, "invalid", "", str(exc))
        return _error(500, "failed", "", str(exc))

    # -- projects --------------------------------------------------------
    @app.post("/v1/projects")
    async def create_project(payload: dict | None = None):
        payload = payload or {}
        project = Project.create(data_root, seed=int(payload.get("seed", 0)))
        return {"project_id": project.id, "status": project.status}

    @app.get("/v1/projects/{project_id}")
    async def get_project(project_id: str):
        return load_project(project_id).state

    @app.post("/v1/projects/{project_id}/video")
    async def upload_video(project_id: str, request: Request, filename: str = "upload.npz"):
        project = load_project(project_id)
        body = await request.body()
        if not body:
            return _error(422, "invalid", "upload", "empty upload body")
        project.upload_dir.mkdir(parents=True, exist_ok=True)
        target = project.upload_dir / Path(filename).name
        target.write_bytes(body)
        project.state["upload"] = target.name
        project.save_state()
        return {"stored": target.name, "bytes": len(body)}

    @app.post("/v1/projects/{project_id}/preprocess")
    async def preprocess_endpoint(project_id: str, payload: dict):
        project = load_project(project_id)
        upload_name = payload.get("source") or project.state.get("upload")
        if upload_name is None:
            return _error(409, "ordering", "preprocess", "no uploaded video to preprocess")
        size = tuple(payload["size"]) if payload.get("size") else None
        video = preprocess(project, project.upload_dir / upload_name, float(payload.get("kps", 8)),
                           size=size, source_fps=payload.get("source_fps"))
        return {"status": project.status, "frames": video.length, "size": list(video.size),
                "fps": video.fps}

    @app.get("/v1/projects/{project_id}/frames/{index}")
    async def get_frame(project_id: str, index: int):
        project = load_project(project_id)
        path = project.frames_dir / f"frame_{index:05d}.png"
        if not path.exists():
            return _error(404, "not_found", "frames", f"no frame {index}")
        return FileResponse(path, media_type="image/png")

    # -- lora -------------------------------------------------------------
    @app.post("/v1/projects/{project_id}/lora/train")
    async def lora_train(project_id: str, payload: dict | None = None):
        project = load_project(project_id)
        cfg = RunConfig.from_dict(payload or {})
        project.require_status("preprocessed", "train-lora")
        job = registry.submit(project_id, "train-lora", cfg.hash(),
                              lambda: train_lora_stage(load_project(project_id), cfg))
        return {"job_id": job.job_id, "status": job.status}

    # -- instruction / propagation ----------------------------------------
    @app.put("/v1/projects/{project_id}/instruction")
    async def put_instruction(project_id: str, payload: dict):
        project = load_project(project_id)
        instr = set_instruction(project, payload)
        return {"status": project.status, "pairs": instr.pair_count}

    @app.get("/v1/projects/{project_id}/instruction")
    async def get_instruction(project_id: str):
        project = load_project(project_id)
        if not project.instruction_path.exists():
            return _error(404, "not_found", "instruction", "no instruction set")
        return json.loads(project.instruction_path.read_text())

    @app.post("/v1/projects/{project_id}/propagate")
    async def propagate_endpoint(project_id: str, payload: dict | None = None):
        project = load_project(project_id)
        payload = payload or {}
        prop = propagate(project, keyframe_blend=bool(payload.get("keyframe_blend", False)))
        previews = [f"/v1/projects/{project_id}/preview/{i}" for i in range(prop.frame_count)]
        return {"status": project.status, "previews": previews}

    @app.get("/v1/projects/{project_id}/preview/{index}")
    async def get_preview(project_id: str, index: int):
        project = load_project(project_id)
        path = project.propagated_dir / f"preview_{index:05d}.png"
        if not path.exists():
            return _error(404, "not_found", "propagate", f"no preview {index}")
        return FileResponse(path, media_type="image/png")

    # -- runs ---------------------------------------------------------------
    @app.post("/v1/projects/{project_id}/run")
    async def run_endpoint(project_id: str, payload: dict | None = None):
        project = load_project(project_id)
        cfg = RunConfig.from_dict(payload or {})
        project.require_status("propagated", "run")

        def work():
            result = run_full(load_project(project_id), cfg)
            return {"score": result.score, "mode": result.mode, "frames": result.edited.length}

        job = registry.submit(project_id, "run", cfg.hash(), work)
        return {"job_id": job.job_id, "status": job.status}

    @app.get("/v1/jobs/{job_id}")
    async def get_job(job_id: str):
        job = registry.get(job_id)
        if job is None:
            return _error(404, "not_found", "jobs", f"no job {job_id}")
        return job.to_dict()

    # -- results --------------------------------------------------------------
    @app.get("/v1/projects/{project_id}/result")
    async def result_meta(project_id: str):
        project = load_project(project_id)
        meta_path = project.result_dir / "result.json"
        if not meta_path.exists():
            return _error(404, "not_found", "result", "no result yet")
        meta = json.loads(meta_path.read_text())
        count = len(list((project.result_dir / "edited").glob("frame_*.png")))
        meta["frames"] = count
        meta["fps"] = project.state.get("fps", DEFAULT_FPS)
        meta["edited"] = [f"/v1/projects/{project_id}/result/edited/{i}" for i in range(count)]
        meta["reconstruction"] = [f"/v1/projects/{project_id}/result/reconstruction/{i}" for i in range(count)]
        return meta

    @app.get("/v1/projects/{project_id}/result/{kind}/{index}")
    async def result_frame(project_id: str, kind: str, index: int):
        if kind not in ("edited", "reconstruction"):
            return _error(404, "not_found", "result", f"unknown result kind {kind}")
        project = load_project(project_id)
        path = project.result_dir / kind / f"frame_{index:05d}.png"
        if not path.exists():
            return _error(404, "not_found", "result", f"no {kind} frame {index}")
        return FileResponse(path, media_type="image/png")

    @app.get("/v1/projects/{project_id}/report")
    async def report(project_id: str):
        project = load_project(project_id)
        if not project.report_csv.exists():
            return _error(404, "not_found", "report", "no report yet")
        return PlainTextResponse(project.report_csv.read_text(), media_type="text/csv")

    return app


def serve(data_root: Path, host: str = "127.0.0.1", port: int = 8008,
          workers: int | None = None) -> None:  # pragma: no cover - manual entry point
    import os

    import uvicorn

    workers = workers or int(os.environ.get("DRAGEDIT_WORKERS", DEFAULT_WORKERS))
    uvicorn.run(create_app(data_root, workers=workers), host=host, port=port)
