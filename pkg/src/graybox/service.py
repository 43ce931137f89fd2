"""HTTP/JSON service hosting debugging sessions.

Plain envelope responses ({ok, data} / {ok, error}) over FastAPI. Session
creation trains the initial model synchronously (desk-scale datasets make
this a seconds-level call); retraining rounds run in a background thread and
concurrent round requests get 409. GETs never mutate session state. Metrics
are polled with a cursor (`since` = last seen epoch) yielding no duplicates
and no gaps.
"""

from __future__ import annotations

import base64
import io
import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import kernels as K
from . import session as S
from . import shapes
from .model import explain


def _ok(data, status=200):
    return JSONResponse({"ok": True, "data": data}, status_code=status)


def _err(code, message, status):
    return JSONResponse({"ok": False, "error": {"code": code, "message": message}},
                        status_code=status)


class ApiError(Exception):
    def __init__(self, code, message, status):
        super().__init__(message)
        self.code = code
        self.message = message
        self.status = status


def _b64_ppm(image: np.ndarray) -> str:
    data = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = image.shape[:2]
    buf = io.BytesIO()
    buf.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
    buf.write(data.tobytes())
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _b64_pgm16(values: np.ndarray) -> str:
    peak = float(values.max())
    quant = (np.rint(values / peak * 65535).astype(">u2") if peak > 0
             else np.zeros(values.shape, dtype=">u2"))
    h, w = values.shape
    buf = io.BytesIO()
    buf.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
    buf.write(quant.tobytes())
    return base64.b64encode(buf.getvalue()).decode("ascii")


class SessionRuntime:
    """One hosted session: the state object, its lock, and the round thread."""

    def __init__(self, sess: S.DebugSession, root: Path):
        self.session = sess
        self.root = root
        self.lock = threading.RLock()
        self.thread: threading.Thread | None = None
        self.last_error: str | None = None

    def busy(self) -> bool:
        return self.thread is not None and self.thread.is_alive()


def _session_view(sess: S.DebugSession, error=None) -> dict:
    return {
        "id": sess.id,
        "state": sess.state,
        "round": sess.round,
        "trained": sess.trained,
        "epochs": len(sess.history),
        "classes": sess.dataset.config.v,
        "concepts": sess.k,
        "confounded_class": sess.dataset.config.confounded_class,
        "feedback_count": len(sess.feedback_log),
        "image_ids": [e.image_id for e in sess.dataset.split("train")],
        "last_error": error,
    }


def create_app(data_root) -> FastAPI:
    data_root = Path(data_root)
    app = FastAPI(title="graybox debugging service")
    runtimes: dict[str, SessionRuntime] = {}

    def runtime(session_id) -> SessionRuntime:
        rt = runtimes.get(session_id)
        if rt is None:
            raise ApiError("unknown_session", f"no session {session_id!r}", 404)
        return rt

    @app.exception_handler(ApiError)
    async def _api_error(_req: Request, exc: ApiError):
        return _err(exc.code, exc.message, exc.status)

    @app.exception_handler(S.FeedbackError)
    async def _feedback_error(_req: Request, exc: S.FeedbackError):
        return _err("invalid_feedback", str(exc), 422)

    @app.exception_handler(S.SessionStateError)
    async def _state_error(_req: Request, exc: S.SessionStateError):
        return _err("invalid_state", str(exc), 409)

    @app.post("/sessions")
    async def create_session(request: Request):
        body = await request.json()
        dataset_dir = body.get("dataset")
        if not dataset_dir:
            raise ApiError("missing_dataset", "body must name a dataset directory", 422)
        path = Path(dataset_dir)
        if not path.is_absolute():
            path = data_root / path
        if not (path / "manifest.json").exists():
            raise ApiError("unknown_dataset", f"no dataset at {path}", 404)
        dataset = shapes.load_dataset(path)
        config = S.SessionConfig.from_json(body["config"]) if body.get("config") \
            else S.SessionConfig()
        sess = S.new_session(dataset, config, dataset_dir=path,
                             session_id=uuid.uuid4().hex[:12])
        S.run_round(sess)  # initial training, synchronous
        rt = SessionRuntime(sess, data_root / "sessions" / sess.id)
        runtimes[sess.id] = rt
        with rt.lock:
            S.persist(sess, rt.root)
        return _ok(_session_view(sess), status=201)

    @app.get("/sessions/{session_id}")
    async def get_session(session_id: str):
        rt = runtime(session_id)
        with rt.lock:
            return _ok(_session_view(rt.session, rt.last_error))

    @app.get("/sessions/{session_id}/concepts")
    async def get_concepts(session_id: str):
        rt = runtime(session_id)
        with rt.lock:
            if rt.busy():
                raise ApiError("busy", "round in progress", 409)
            sess = rt.session
            packets = S.assess(sess)
            data = []
            for p in packets:
                a, b = sess.model.patch_size
                proto_img = np.clip(sess.model.prototypes[p.concept].reshape(a, b, 3),
                                    0.0, 1.0)
                reps = []
                for (rid, loc, act), overlay in zip(p.representatives, p.overlays):
                    entry = S._entry_by_id(sess, rid)
                    reps.append({
                        "image_id": rid,
                        "location": list(loc),
                        "activation": act,
                        "image_ppm": _b64_ppm(entry.raster),
                        "attribution_pgm": _b64_pgm16(overlay.values),
                        "attribution_total": overlay.total,
                    })
                data.append({
                    "concept": p.concept,
                    "owner_class": p.owner_class,
                    "prototype_ppm": _b64_ppm(proto_img),
                    "weights": [float(w) for w in p.weights],
                    "kappa_row": [float(x) for x in p.kappa_row],
                    "representatives": reps,
                })
            return _ok({"packets": data})

    @app.get("/sessions/{session_id}/explanations")
    async def get_explanation(session_id: str, image: str,
                              class_index: int = Query(None, alias="class")):
        rt = runtime(session_id)
        with rt.lock:
            if rt.busy():
                raise ApiError("busy", "round in progress", 409)
            sess = rt.session
            if not sess.trained:
                raise ApiError("untrained", "session has no trained model", 409)
            try:
                entry = S._entry_by_id(sess, image)
            except S.FeedbackError as exc:
                raise ApiError("unknown_image", str(exc), 404) from exc
            y = int(class_index) if class_index is not None \
                else sess.dataset.config.confounded_class
            if not 0 <= y < sess.dataset.config.v:
                raise ApiError("invalid_class", f"class {y} out of range", 422)
            exp = explain(sess.model, entry.raster, y)
            return _ok({
                "image": image,
                "class": y,
                "pairs": [[w, c] for w, c in exp.pairs],
                "score": exp.score(),
                "argmax_locations": [[int(r), int(c)] for r, c in exp.argmax_location],
            })

    @app.post("/sessions/{session_id}/feedback")
    async def post_feedback(session_id: str, request: Request):
        rt = runtime(session_id)
        body = await request.json()
        with rt.lock:
            if rt.busy():
                raise ApiError("busy", "round in progress", 409)
            fb = _parse_feedback(body)
            S.submit_feedback(rt.session, fb)
            S.persist(rt.session, rt.root)
            return _ok({"feedback_count": len(rt.session.feedback_log),
                        "state": rt.session.state})

    @app.post("/sessions/{session_id}/rounds")
    async def post_round(session_id: str):
        rt = runtime(session_id)
        with rt.lock:
            if rt.busy():
                raise ApiError("busy", "round in progress", 409)
            sess = rt.session
            S.begin_round(sess)

            def _run():
                try:
                    S.execute_round(sess)
                    with rt.lock:
                        S.persist(sess, rt.root)
                except Exception as exc:  # state restored by execute_round
                    rt.last_error = str(exc)

            rt.thread = threading.Thread(target=_run, daemon=True)
            rt.thread.start()
            return _ok({"state": sess.state, "round": sess.round}, status=202)

    @app.get("/sessions/{session_id}/metrics")
    async def get_metrics(session_id: str, since: int = -1):
        rt = runtime(session_id)
        sess = rt.session
        records = [r.to_json() for r in list(sess.history.records) if r.epoch > since]
        return _ok({"records": records, "state": sess.state, "round": sess.round})

    static_dir = Path(__file__).resolve().parent.parent.parent / "frontend" / "dist"
    if static_dir.is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="console")

    return app


def _parse_feedback(body: dict) -> S.Feedback:
    kind = body.get("kind")
    if kind not in S.FEEDBACK_KINDS:
        raise S.FeedbackError(f"unknown feedback kind {kind!r}")
    scope = None
    if body.get("scope"):
        s = body["scope"]
        try:
            scope = K.FeedbackScope(kind=s.get("kind"), x_id=s.get("x_id"),
                                    y=s.get("y"))
        except ValueError as exc:
            raise S.FeedbackError(str(exc)) from exc
    region = None
    if body.get("region") is not None:
        reg = body["region"]
        try:
            shape = tuple(reg["shape"])
            raw = base64.b64decode(reg["bits"])
            bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
            region = bits[: shape[0] * shape[1]].reshape(shape).astype(np.float64)
        except Exception as exc:
            raise S.FeedbackError(f"malformed region mask: {exc}") from exc
    return S.Feedback(kind=kind, author=body.get("author", "human"),
                      concept=body.get("concept"), scope=scope,
                      image_id=body.get("image_id"), desired=body.get("desired"),
                      region=region, class_index=body.get("class_index"))


def serve(port: int, data_root) -> None:
    import uvicorn

    uvicorn.run(create_app(data_root), host="127.0.0.1", port=port, log_level="warning")
