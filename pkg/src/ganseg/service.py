"""HTTP service for the annotate -> train -> preview loop.

Single-project, single-user: request handling is concurrent, project state is
guarded by one lock, and at most one training job runs at a time (conflicting
train requests get 409). Mask uploads are validated pixel-by-pixel against the
class palette and stored verbatim, so a later GET returns bit-identical bytes.
"""

import base64
import io
import json
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import FileResponse, JSONResponse
from PIL import Image, UnidentifiedImageError

from .backbone import generate_with_taps
from .datasets import load_image, save_annotation
from .distillation import load_unet, predict_unet
from .errors import GansegError, ProjectError
from .inversion import represent_image
from .project import Project
from .report import class_color_image
from .segmenters import (IGNORE_LABEL, SegmenterSpec, build_segmenter,
                         load_segmenter, logits_to_mask, predict,
                         save_segmenter, train_fewshot, upsample_logits)


class TrainJob:
    """Background few-shot training with a polled status snapshot.

    Status follows idle -> running -> (done | failed); readers always see a
    consistent copy.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._thread = None
        self._status = {"state": "idle", "progress": 0.0, "error": None,
                        "metrics": None}

    def status(self) -> dict:
        with self._lock:
            return dict(self._status)

    def start(self, target) -> bool:
        """Run `target(set_progress)` in a thread; False if already running."""
        with self._lock:
            if self._status["state"] == "running":
                return False
            self._status = {"state": "running", "progress": 0.0, "error": None,
                            "metrics": None}

        def set_progress(fraction):
            with self._lock:
                self._status["progress"] = float(fraction)

        def run():
            try:
                metrics = target(set_progress)
                with self._lock:
                    self._status.update(state="done", progress=1.0, metrics=metrics)
            except Exception as e:  # surfaced via /train/status
                with self._lock:
                    self._status.update(state="failed", error=str(e))

        self._thread = threading.Thread(target=run, daemon=True)
        self._thread.start()
        return True

    def join(self, timeout=None):
        if self._thread is not None:
            self._thread.join(timeout)


def _png_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


def create_app(project: Project, static_dir=None) -> FastAPI:
    """Build the app; `static_dir` (optional) mounts the annotation UI at /ui."""
    from fastapi.middleware.cors import CORSMiddleware

    app = FastAPI(title="ganseg", version="0.1.0")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    job = TrainJob()
    state_lock = threading.Lock()
    app.state.train_job = job

    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=str(static_dir), html=True),
                  name="ui")

    def error_json(status, reason, **extra):
        return JSONResponse(status_code=status, content={"error": reason, **extra})

    @app.get("/classes")
    def classes():
        palette = project.palette_array().tolist()
        return {"classes": [
            {"id": i, "name": name, "color": palette[i] if i < len(palette) else [64, 64, 64]}
            for i, name in enumerate(project.class_names)
        ], "ignore_value": IGNORE_LABEL}

    @app.get("/samples")
    def samples():
        with state_lock:
            return {"samples": project.list_samples()}

    @app.get("/samples/{sample_id}/image")
    def sample_image(sample_id: int):
        path = project.sample_dir(sample_id) / "image.png"
        if not path.exists():
            return error_json(404, f"unknown sample {sample_id}")
        return FileResponse(path, media_type="image/png")

    @app.get("/samples/{sample_id}/mask")
    def sample_mask(sample_id: int):
        path = project.sample_dir(sample_id) / "mask.png"
        if not path.exists():
            return error_json(404, f"no mask for sample {sample_id}")
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.put("/samples/{sample_id}/mask")
    async def put_mask(sample_id: int, request: Request):
        sample_dir = project.sample_dir(sample_id)
        if not (sample_dir / "image.png").exists():
            return error_json(404, f"unknown sample {sample_id}")
        body = await request.body()
        try:
            im = Image.open(io.BytesIO(body))
            im.load()
        except (UnidentifiedImageError, OSError, SyntaxError) as e:
            return error_json(422, f"not a decodable image: {e}")
        if im.mode not in ("P", "L"):
            return error_json(422, f"mask must be indexed or grayscale, got mode {im.mode}")
        labels = np.asarray(im, dtype=np.uint8)
        bad = labels[(labels >= project.n_classes) & (labels != IGNORE_LABEL)]
        if bad.size:
            return error_json(422, "mask value outside palette",
                              offending_value=int(bad.flat[0]))
        expected = np.asarray(Image.open(sample_dir / "image.png")).shape[:2]
        if labels.shape != expected:
            return error_json(422, f"mask shape {labels.shape} != image {expected}")
        with state_lock:
            (sample_dir / "mask.png").write_bytes(body)
        return {"ok": True, "sample_id": sample_id}

    def _run_training(body: dict, set_progress):
        gen = project.require_generator()
        sel = project.layer_selection()
        annotated = project.annotated_samples()
        if not annotated:
            raise ProjectError("no annotations", artifact="annotations")
        shots = body.get("shots")
        if shots:
            annotated = annotated[:int(shots)]
        from .cli import _representation_for_sample
        pairs = []
        for entry in annotated:
            rep = _representation_for_sample(project, gen, sel, entry["id"])
            pairs.append((rep, project.load_mask(entry["id"])))
        arch = body.get("arch") or project.config["fewshot"].get("arch", "CNN_DEFAULT")
        overrides = {}
        if body.get("epochs"):
            overrides["epochs"] = int(body["epochs"])
        cfg = project.fewshot_config(**overrides)
        spec = SegmenterSpec(variant=arch, input_channels=pairs[0][0].n_channels,
                             n_classes=project.n_classes)
        model = build_segmenter(spec, rng_seed=cfg.rng_seed)
        model, losses = train_fewshot(
            model, pairs, cfg,
            progress=lambda epoch, _loss: set_progress((epoch + 1) / cfg.epochs))
        save_segmenter(model, project.model_path("fewshot"))
        return {"arch": arch, "shots": len(pairs), "final_loss": losses[-1],
                "epochs": cfg.epochs}

    @app.post("/train")
    async def train(request: Request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            body = {}
        if not isinstance(body, dict):
            body = {}
        try:
            annotated = project.annotated_samples()
            if not annotated:
                return error_json(422, "no annotations")
        except GansegError as e:
            return error_json(422, str(e))
        started = job.start(lambda progress: _run_training(body, progress))
        if not started:
            return error_json(409, "training already in progress")
        return {"ok": True}

    @app.get("/train/status")
    def train_status():
        return job.status()

    @app.post("/predict")
    async def predict_endpoint(request: Request):
        content_type = request.headers.get("content-type", "")
        body = await request.body()
        image = None
        sample_id = None
        opts = {}
        if content_type.startswith("image/"):
            try:
                im = Image.open(io.BytesIO(body)).convert("RGB")
            except (UnidentifiedImageError, OSError) as e:
                return error_json(422, f"not a decodable image: {e}")
            image = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
        else:
            try:
                opts = json.loads(body) if body else {}
            except json.JSONDecodeError:
                return error_json(422, "body must be JSON or an image")
            sample_id = opts.get("sample_id")
            if sample_id is None:
                return error_json(422, "pass sample_id or upload an image body")
            path = project.sample_dir(int(sample_id)) / "image.png"
            if not path.exists():
                return error_json(404, f"unknown sample {sample_id}")
            image = load_image(path)

        use_autoshot = bool(opts.get("use_autoshot", False))
        try:
            if use_autoshot:
                unet = load_unet(project.require_model("autoshot"))
                logits = predict_unet(unet, image)
            else:
                model_path = project.model_path("fewshot")
                if not model_path.exists():
                    return error_json(409, "no trained model; train first")
                model = load_segmenter(model_path)
                gen = project.require_generator()
                sel = project.layer_selection()
                if sample_id is not None:
                    from .cli import _representation_for_sample
                    rep = _representation_for_sample(project, gen, sel, int(sample_id))
                else:
                    cfg = project.inversion_config(
                        **({"steps": int(opts["steps"])} if opts.get("steps") else {}))
                    rep, _ = represent_image(gen, image, sel, cfg,
                                             target_res=project.target_res())
                logits = upsample_logits(predict(model, rep), image.shape[:2])
        except GansegError as e:
            return error_json(409, str(e))

        mask = logits_to_mask(logits, class_names=project.class_names)
        scores = logits.scores
        probs = np.exp(scores - scores.max(axis=2, keepdims=True))
        probs /= probs.sum(axis=2, keepdims=True)
        confidence = {}
        for c, name in enumerate(project.class_names[:logits.n_classes]):
            gray = (probs[:, :, c] * 255).round().astype(np.uint8)
            confidence[name] = base64.b64encode(_png_bytes(gray)).decode("ascii")

        mask_png = _png_bytes(mask.labels)
        overlay = class_color_image(mask.labels, project.n_classes)
        return {
            "mask_png_base64": base64.b64encode(mask_png).decode("ascii"),
            "overlay_png_base64": base64.b64encode(_png_bytes(overlay)).decode("ascii"),
            "confidence_png_base64": confidence,
            "classes": project.class_names,
        }

    return app
