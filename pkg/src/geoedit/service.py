"""Session-based HTTP API exposing the edit pipeline to interactive clients.

Wire protocol: JSON request/response bodies, raw PNG bytes for image parts.
Field names and endpoints are documented in docs/api.md.
"""
from __future__ import annotations

import io
import json
import secrets
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image

from . import imaging
from .geometry import OutOfBoundsError
from .imaging import ImageBuffer, MaskBuffer
from .instructions import EditInstruction
from .pipeline import EditRequest, Editor
from .sampler import SamplerConfig

MASK_ROLES = ("source", "completion")


@dataclass
class ServiceConfig:
    data_dir: Path
    workers: int = 2
    session_ttl: float = 3600.0
    max_upload_bytes: int = 8 * 1024 * 1024
    sampler_steps: int = 50
    guidance_scale: float = 7.5
    seed: int = 0

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(steps=self.sampler_steps, guidance_scale=self.guidance_scale, seed=self.seed)


@dataclass
class Session:
    id: str
    directory: Path
    created: float
    touched: float
    lock: threading.Lock = field(default_factory=threading.Lock)
    state: str = "idle"  # idle | running | done | failed
    step: Optional[str] = None
    reason: Optional[str] = None

    def status(self) -> dict:
        return {"state": self.state, "step": self.step, "reason": self.reason}

    def artifacts(self) -> list:
        return sorted(p.name for p in self.directory.glob("*.png"))


def _error(status: int, code: str, detail: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": code, "detail": detail})


def _png_bytes(buffer) -> bytes:
    out = io.BytesIO()
    if isinstance(buffer, ImageBuffer):
        arr = np.clip(np.rint(buffer.data * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(out, format="PNG")
    else:
        Image.fromarray(buffer.data * 255, mode="L").save(out, format="PNG")
    return out.getvalue()


def _decode_image(raw: bytes) -> ImageBuffer:
    img = Image.open(io.BytesIO(raw)).convert("RGB")
    return ImageBuffer(np.asarray(img, dtype=np.float32) / 255.0)


def _decode_mask(raw: bytes) -> MaskBuffer:
    img = Image.open(io.BytesIO(raw)).convert("L")
    return MaskBuffer(np.asarray(img) >= 128)


def grow_mask_from_clicks(image: ImageBuffer, points: list, tolerance: float) -> MaskBuffer:
    """Region-grow flood fill from each click by color distance; union of regions."""
    from scipy import ndimage

    h, w = image.height, image.width
    out = np.zeros((h, w), dtype=np.uint8)
    for point in points:
        x, y = int(round(point[0])), int(round(point[1]))
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"click ({x}, {y}) outside the image")
        seed_color = image.data[y, x]
        dist = np.sqrt(((image.data - seed_color) ** 2).sum(axis=2))
        similar = dist <= tolerance
        labels, _ = ndimage.label(similar)
        out |= (labels == labels[y, x]).astype(np.uint8)
    return MaskBuffer(out)


class SessionStore:
    def __init__(self, root: Path, ttl: float):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.ttl = ttl
        self._sessions: dict = {}
        self._lock = threading.Lock()

    def create(self) -> Session:
        sid = secrets.token_hex(8)
        directory = self.root / sid
        directory.mkdir(parents=True)
        now = time.time()
        session = Session(id=sid, directory=directory, created=now, touched=now)
        with self._lock:
            self._sessions[sid] = session
        return session

    def get(self, sid: str) -> Optional[Session]:
        self._expire()
        with self._lock:
            session = self._sessions.get(sid)
        if session is not None:
            session.touched = time.time()
        return session

    def _expire(self) -> None:
        now = time.time()
        with self._lock:
            for sid in [s for s, sess in self._sessions.items()
                        if now - sess.touched > self.ttl and sess.state != "running"]:
                del self._sessions[sid]


def create_app(editor: Editor, config: ServiceConfig) -> FastAPI:
    app = FastAPI(title="geoedit service")
    store = SessionStore(config.data_dir, config.session_ttl)
    pool = ThreadPoolExecutor(max_workers=config.workers)
    app.state.store = store

    def load_session(sid: str):
        session = store.get(sid)
        if session is None:
            return None, _error(404, "unknown_session", f"no session {sid!r}")
        return session, None

    def session_image(session: Session) -> ImageBuffer:
        return imaging.load_png(session.directory / "source.png")

    def session_mask(session: Session, role: str) -> Optional[MaskBuffer]:
        path = session.directory / f"{role}_mask.png"
        if not path.exists():
            return None
        return imaging.load_mask_png(path)

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request):
        raw = await request.body()
        if len(raw) > config.max_upload_bytes:
            return _error(413, "upload_too_large", f"upload exceeds {config.max_upload_bytes} bytes")
        try:
            image = _decode_image(raw)
        except Exception as exc:
            return _error(400, "bad_image", f"cannot decode PNG upload: {exc}")
        session = store.create()
        imaging.save_png(image, session.directory / "source.png")
        return {"id": session.id, "height": image.height, "width": image.width}

    @app.get("/sessions/{sid}")
    def session_info(sid: str):
        session, err = load_session(sid)
        if err:
            return err
        return {
            "id": session.id,
            "status": session.status(),
            "artifacts": session.artifacts(),
        }

    @app.get("/sessions/{sid}/status")
    def session_status(sid: str):
        session, err = load_session(sid)
        if err:
            return err
        return session.status()

    @app.post("/sessions/{sid}/mask/assist")
    async def mask_assist(sid: str, request: Request):
        session, err = load_session(sid)
        if err:
            return err
        body = await request.json()
        points = body.get("points", [])
        tolerance = float(body.get("tolerance", 0.15))
        if not points:
            return _error(400, "no_points", "at least one click point is required")
        try:
            mask = grow_mask_from_clicks(session_image(session), points, tolerance)
        except ValueError as exc:
            return _error(400, "bad_points", str(exc))
        return Response(content=_png_bytes(mask), media_type="image/png")

    @app.put("/sessions/{sid}/mask/{role}")
    async def set_mask(sid: str, role: str, request: Request):
        session, err = load_session(sid)
        if err:
            return err
        if role not in MASK_ROLES:
            return _error(400, "bad_role", f"mask role must be one of {MASK_ROLES}")
        raw = await request.body()
        if len(raw) > config.max_upload_bytes:
            return _error(413, "upload_too_large", f"upload exceeds {config.max_upload_bytes} bytes")
        try:
            mask = _decode_mask(raw)
        except Exception as exc:
            return _error(400, "bad_mask", f"cannot decode mask PNG: {exc}")
        image = session_image(session)
        if (mask.height, mask.width) != (image.height, image.width):
            return _error(409, "dimension_mismatch", "mask dimensions differ from the session image")
        imaging.save_png(mask, session.directory / f"{role}_mask.png")
        return {"ok": True, "role": role}

    def parse_instruction(body: dict):
        try:
            return EditInstruction.from_dict(body["instruction"]), None
        except KeyError:
            return None, _error(409, "missing_instruction", "no instruction given and none previewed")
        except (ValueError, TypeError) as exc:
            return None, _error(400, "bad_instruction", str(exc))

    @app.post("/sessions/{sid}/preview")
    async def preview(sid: str, request: Request):
        session, err = load_session(sid)
        if err:
            return err
        mask = session_mask(session, "source")
        if mask is None:
            return _error(409, "missing_mask", "upload a source mask before previewing")
        body = await request.json()
        instr, err = parse_instruction(body)
        if err:
            return err
        image = session_image(session)
        try:
            edit_req = EditRequest(
                image=image, source_mask=mask, instruction=instr,
                config=config.sampler_config(),
            )
            coarse, target = editor.step1_transform(edit_req)
        except OutOfBoundsError as exc:
            return _error(409, "out_of_bounds", str(exc))
        except ValueError as exc:
            return _error(400, "bad_request", str(exc))
        imaging.save_png(coarse, session.directory / "preview_coarse.png")
        imaging.save_png(target, session.directory / "preview_target_mask.png")
        (session.directory / "instruction.json").write_text(
            json.dumps(instr.to_dict(), sort_keys=True) + "\n"
        )
        return {"coarse": "preview_coarse.png", "target_mask": "preview_target_mask.png"}

    def start_job(session: Session, step: str, work) -> Optional[JSONResponse]:
        with session.lock:
            if session.state == "running":
                return _error(409, "job_running", f"a {session.step} job is already in flight")
            session.state = "running"
            session.step = step
            session.reason = None

        def runner():
            try:
                work()
            except Exception as exc:  # propagate reason to the client
                with session.lock:
                    session.state = "failed"
                    session.reason = f"{type(exc).__name__}: {exc}"
            else:
                with session.lock:
                    session.state = "done"

        pool.submit(runner)
        return None

    @app.post("/sessions/{sid}/run/inpaint", status_code=202)
    async def run_inpaint(sid: str, request: Request):
        session, err = load_session(sid)
        if err:
            return err
        mask = session_mask(session, "source")
        if mask is None:
            return _error(409, "missing_mask", "upload a source mask before inpainting")
        body = await request.json() if int(request.headers.get("content-length") or 0) else {}
        prompt = body.get("prompt", "empty scene")
        image = session_image(session)

        def work():
            background, _ = editor.step2_inpaint(image, mask, prompt, config.sampler_config())
            imaging.save_png(background, session.directory / "background.png")

        err = start_job(session, "inpaint", work)
        return err if err else {"job": "inpaint", "status": "running"}

    @app.post("/sessions/{sid}/run/refine", status_code=202)
    async def run_refine(sid: str, request: Request):
        session, err = load_session(sid)
        if err:
            return err
        mask = session_mask(session, "source")
        if mask is None:
            return _error(409, "missing_mask", "upload a source mask first")
        needed = ["preview_coarse.png", "preview_target_mask.png", "background.png"]
        missing = [n for n in needed if not (session.directory / n).exists()]
        if missing:
            return _error(409, "missing_prerequisites", f"run preview/inpaint first; missing {missing}")
        body = await request.json() if int(request.headers.get("content-length") or 0) else {}
        prompt = body.get("prompt")
        image = session_image(session)
        completion = session_mask(session, "completion")

        def work():
            coarse = imaging.load_png(session.directory / "preview_coarse.png")
            target = imaging.load_mask_png(session.directory / "preview_target_mask.png")
            background = imaging.load_png(session.directory / "background.png")
            composite = imaging.blend(coarse, background, target)
            imaging.save_png(composite, session.directory / "composite.png")
            refined, _ = editor.step3_refine(
                composite, image, mask, target,
                completion_mask=completion, prompt=prompt, config=config.sampler_config(),
            )
            imaging.save_png(refined, session.directory / "refined.png")

        err = start_job(session, "refine", work)
        return err if err else {"job": "refine", "status": "running"}

    @app.post("/sessions/{sid}/run/full", status_code=202)
    async def run_full(sid: str, request: Request):
        session, err = load_session(sid)
        if err:
            return err
        mask = session_mask(session, "source")
        if mask is None:
            return _error(409, "missing_mask", "upload a source mask first")
        body = await request.json() if int(request.headers.get("content-length") or 0) else {}
        if "instruction" in body:
            instr, err = parse_instruction(body)
            if err:
                return err
        else:
            stored = session.directory / "instruction.json"
            if not stored.exists():
                return _error(409, "missing_instruction", "preview an instruction or pass one in the body")
            instr = EditInstruction.from_dict(json.loads(stored.read_text()))
        prompt = body.get("prompt")
        image = session_image(session)
        completion = session_mask(session, "completion")

        def work():
            edit_req = EditRequest(
                image=image, source_mask=mask, instruction=instr,
                completion_mask=completion, prompt=prompt,
                config=config.sampler_config(),
            )
            result = editor.edit(edit_req)
            result.save(session.directory)

        err = start_job(session, "full", work)
        return err if err else {"job": "full", "status": "running"}

    @app.get("/sessions/{sid}/artifacts/{name}")
    def get_artifact(sid: str, name: str):
        session, err = load_session(sid)
        if err:
            return err
        path = session.directory / name
        if "/" in name or not name.endswith(".png") or not path.exists():
            return _error(404, "unknown_artifact", f"no artifact {name!r}")
        return Response(content=path.read_bytes(), media_type="image/png")

    return app


def serve(editor: Editor, config: ServiceConfig, port: int = 8000, host: str = "127.0.0.1") -> None:
    import uvicorn

    app = create_app(editor, config)
    frontend = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if frontend.exists():
        app.mount("/", StaticFiles(directory=frontend, html=True), name="ui")
    # clients poll with long gaps while jobs run; keep idle connections alive
    uvicorn.run(app, host=host, port=port, log_level="warning", timeout_keep_alive=120)
