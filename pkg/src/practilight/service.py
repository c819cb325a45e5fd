"""HTTP front door: project persistence, depth/preview/relight endpoints and
an asynchronous FIFO job queue feeding the relighting sampler.

Persistence is an embedded sqlite store plus a content-addressed blob
directory; blobs are immutable once written, so identical renders share
storage and identical previews are byte-identical by construction.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import queue
import sqlite3
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response, UploadFile
from PIL import Image

from .control import LightSpecFile, condition_from_image, estimate_depth
from .diffusion import build_backbone
from .imgio import to_gray
from .lora import LoraAdapter, attach_lora
from .render.core import RenderConfig
from .sampler import GuidanceConfig, relight, sample_source

PREVIEW_SPP = 4
FULL_SPP = 16

JOB_KINDS = ("depth", "preview", "relight")
JOB_STATES = ("queued", "running", "done", "failed")
_TRANSITIONS = {"queued": {"running"}, "running": {"done", "failed"}}


class InvalidTransition(RuntimeError):
    pass


@dataclass
class ServiceConfig:
    store_dir: str = "practilight_store"
    adapter_path: str | None = None
    backbone: str = "tiny"
    port: int = 8321
    preview_spp: int = PREVIEW_SPP
    full_spp: int = FULL_SPP
    workers: int = 1  # one sampler worker by default (model memory)

    @classmethod
    def from_env(cls, **overrides) -> "ServiceConfig":
        cfg = cls(**overrides)
        if os.environ.get("PRACTILIGHT_ADAPTER"):
            cfg.adapter_path = os.environ["PRACTILIGHT_ADAPTER"]
        if os.environ.get("PRACTILIGHT_BACKBONE_DIR"):
            cfg.backbone = os.environ["PRACTILIGHT_BACKBONE_DIR"]
        if os.environ.get("PRACTILIGHT_PORT"):
            cfg.port = int(os.environ["PRACTILIGHT_PORT"])
        return cfg


def png_bytes(img: np.ndarray) -> bytes:
    """Encode [0,1] float image to 8-bit PNG bytes (same quantization as imgio)."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data))
    return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def canonical_spec(spec_dict: dict) -> str:
    return json.dumps(spec_dict, sort_keys=True, separators=(",", ":"))


class ArtifactStore:
    """sqlite records + sha256 content-addressed blobs. Thread-safe."""

    def __init__(self, root):
        self.root = Path(root)
        self.blob_dir = self.root / "blobs"
        self.blob_dir.mkdir(parents=True, exist_ok=True)
        self.db_path = self.root / "practilight.db"
        self._lock = threading.Lock()
        self._init_db()

    def _connect(self):
        con = sqlite3.connect(self.db_path)
        con.row_factory = sqlite3.Row
        return con

    def _init_db(self):
        with self._lock, self._connect() as con:
            con.executescript(
                """
                CREATE TABLE IF NOT EXISTS projects (
                    id TEXT PRIMARY KEY, created REAL, updated REAL, data TEXT
                );
                CREATE TABLE IF NOT EXISTS jobs (
                    id TEXT PRIMARY KEY, project_id TEXT, kind TEXT,
                    state TEXT, progress REAL, result TEXT, error TEXT,
                    fingerprint TEXT, created REAL
                );
                CREATE TABLE IF NOT EXISTS results (
                    id TEXT PRIMARY KEY, project_id TEXT, image_blob TEXT,
                    sidecar TEXT, created REAL
                );
                """
            )

    # -- blobs --------------------------------------------------------------

    def put_blob(self, data: bytes) -> str:
        key = hashlib.sha256(data).hexdigest()
        path = self.blob_dir / key[:2] / key[2:]
        if not path.exists():
            path.parent.mkdir(exist_ok=True)
            tmp = path.with_suffix(".tmp-" + uuid.uuid4().hex)
            tmp.write_bytes(data)
            tmp.rename(path)  # atomic; blobs immutable once written
        return key

    def get_blob(self, key: str) -> bytes:
        path = self.blob_dir / key[:2] / key[2:]
        if not path.exists():
            raise KeyError(key)
        return path.read_bytes()

    # -- projects -----------------------------------------------------------

    def create_project(self, data: dict) -> dict:
        pid = uuid.uuid4().hex
        now = time.time()
        data = dict(data, id=pid, created=now, updated=now)
        with self._lock, self._connect() as con:
            con.execute(
                "INSERT INTO projects VALUES (?,?,?,?)",
                (pid, now, now, json.dumps(data)),
            )
        return data

    def get_project(self, pid: str) -> dict | None:
        with self._lock, self._connect() as con:
            row = con.execute("SELECT data FROM projects WHERE id=?", (pid,)).fetchone()
        return json.loads(row["data"]) if row else None

    def update_project(self, pid: str, **fields) -> dict:
        with self._lock, self._connect() as con:
            row = con.execute("SELECT data FROM projects WHERE id=?", (pid,)).fetchone()
            if row is None:
                raise KeyError(pid)
            data = json.loads(row["data"])
            data.update(fields)
            data["updated"] = time.time()
            con.execute(
                "UPDATE projects SET data=?, updated=? WHERE id=?",
                (json.dumps(data), data["updated"], pid),
            )
        return data

    # -- jobs ---------------------------------------------------------------

    def create_job(self, project_id: str, kind: str, fingerprint: str) -> dict:
        if kind not in JOB_KINDS:
            raise ValueError(f"unknown job kind {kind!r}")
        jid = uuid.uuid4().hex
        now = time.time()
        with self._lock, self._connect() as con:
            con.execute(
                "INSERT INTO jobs VALUES (?,?,?,?,?,?,?,?,?)",
                (jid, project_id, kind, "queued", 0.0, None, None, fingerprint, now),
            )
        return self.get_job(jid)

    def get_job(self, jid: str) -> dict | None:
        with self._lock, self._connect() as con:
            row = con.execute("SELECT * FROM jobs WHERE id=?", (jid,)).fetchone()
        return dict(row) if row else None

    def active_job(self, fingerprint: str) -> dict | None:
        with self._lock, self._connect() as con:
            row = con.execute(
                "SELECT * FROM jobs WHERE fingerprint=? AND state IN ('queued','running')",
                (fingerprint,),
            ).fetchone()
        return dict(row) if row else None

    def update_job(self, jid: str, *, state=None, progress=None, result=None, error=None):
        with self._lock, self._connect() as con:
            row = con.execute("SELECT state, progress FROM jobs WHERE id=?", (jid,)).fetchone()
            if row is None:
                raise KeyError(jid)
            if state is not None and state != row["state"]:
                if state not in _TRANSITIONS.get(row["state"], set()):
                    raise InvalidTransition(f"{row['state']} -> {state}")
            if progress is not None and progress < row["progress"]:
                raise InvalidTransition("progress must be monotone non-decreasing")
            sets, vals = [], []
            for col, v in (("state", state), ("progress", progress), ("result", result), ("error", error)):
                if v is not None:
                    sets.append(f"{col}=?")
                    vals.append(v)
            if sets:
                con.execute(f"UPDATE jobs SET {', '.join(sets)} WHERE id=?", (*vals, jid))

    # -- results ------------------------------------------------------------

    def put_result(self, project_id: str, image_blob: str, sidecar: dict) -> str:
        rid = uuid.uuid4().hex
        with self._lock, self._connect() as con:
            con.execute(
                "INSERT INTO results VALUES (?,?,?,?,?)",
                (rid, project_id, image_blob, json.dumps(sidecar), time.time()),
            )
        return rid

    def get_result(self, rid: str) -> dict | None:
        with self._lock, self._connect() as con:
            row = con.execute("SELECT * FROM results WHERE id=?", (rid,)).fetchone()
        return dict(row) if row else None


@dataclass
class RelightEngine:
    """Lazily built backbone + adapter shared by the workers."""

    config: ServiceConfig
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def __post_init__(self):
        self._backbone = None
        self._adapter = None
        self._caches: dict[tuple, object] = {}

    @property
    def backbone(self):
        with self._lock:
            if self._backbone is None:
                self._backbone = build_backbone(self.config.backbone)
            return self._backbone

    @property
    def adapter(self) -> LoraAdapter:
        with self._lock:
            if self._adapter is None:
                bb = self._backbone or build_backbone(self.config.backbone)
                self._backbone = bb
                if self.config.adapter_path:
                    self._adapter = LoraAdapter.load_into(self.config.adapter_path, bb)
                else:
                    self._adapter = attach_lora(bb, rank=8)
            return self._adapter

    def source_cache(self, project: dict, gcfg: GuidanceConfig):
        """Source trajectory, computed lazily on first relight and memoized."""
        key = (project["id"], gcfg.steps, gcfg.cfg_scale, gcfg.negative_prompt)
        with self._lock:
            cached = self._caches.get(key)
        if cached is not None:
            return cached
        _, cache = sample_source(
            self.backbone, project["prompt"], project["seed"], gcfg
        )
        with self._lock:
            self._caches[key] = cache
        return cache


def guidance_from_overrides(overrides: dict) -> GuidanceConfig:
    base = GuidanceConfig()
    known = set(base.to_sidecar())
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown guidance fields: {sorted(unknown)}")
    kwargs = dict(overrides)
    for key in ("gamma_window", "injection_window", "controlnet_window"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return replace(base, **kwargs)


def render_condition_bytes(
    image: np.ndarray, spec: LightSpecFile, spp: int, resolution=None
) -> bytes:
    """Deterministic condition render -> PNG bytes; shared by preview and CLI."""
    h, w = image.shape[:2]
    res = resolution or (w, h)
    cfg = RenderConfig(resolution=res, samples_per_pixel=spp, rng_seed=0)
    cond, _ = condition_from_image(image, spec, render_cfg=cfg)
    return png_bytes(cond.pixels)


class JobQueue:
    """FIFO queue with serialized execution per worker."""

    def __init__(self, store: ArtifactStore, handlers: dict, workers: int = 1):
        self.store = store
        self.handlers = handlers
        self._q: queue.Queue = queue.Queue()
        self._threads = [
            threading.Thread(target=self._run, daemon=True) for _ in range(max(1, workers))
        ]
        for t in self._threads:
            t.start()

    def submit(self, job: dict):
        self._q.put(job["id"])

    def _run(self):
        while True:
            jid = self._q.get()
            if jid is None:
                return
            job = self.store.get_job(jid)
            if job is None:
                continue
            try:
                self.store.update_job(jid, state="running")
                result = self.handlers[job["kind"]](job)
                self.store.update_job(jid, state="done", progress=1.0, result=result)
            except Exception as exc:  # worker crash -> failed, queue continues
                try:
                    self.store.update_job(jid, state="failed", error=f"{type(exc).__name__}: {exc}")
                except InvalidTransition:
                    pass
            finally:
                self._q.task_done()

    def join(self, timeout: float | None = None):
        deadline = None if timeout is None else time.time() + timeout
        while not self._q.empty() or self._q.unfinished_tasks:
            if deadline is not None and time.time() > deadline:
                raise TimeoutError("jobs still pending")
            time.sleep(0.01)

    def shutdown(self):
        for _ in self._threads:
            self._q.put(None)


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig.from_env()
    store = ArtifactStore(config.store_dir)
    engine = RelightEngine(config)
    app = FastAPI(title="practilight")
    app.state.store = store
    app.state.config = config
    app.state.engine = engine
    locks: dict[str, threading.Lock] = {}
    locks_guard = threading.Lock()

    def project_lock(pid: str) -> threading.Lock:
        with locks_guard:
            return locks.setdefault(pid, threading.Lock())

    def get_project_or_404(pid: str) -> dict:
        proj = store.get_project(pid)
        if proj is None:
            raise HTTPException(status_code=404, detail="unknown project")
        return proj

    def load_source(proj: dict) -> np.ndarray:
        return decode_png(store.get_blob(proj["source_blob"]))

    def parse_spec(body: dict) -> tuple[LightSpecFile, str]:
        spec_dict = body.get("light_spec", body)
        try:
            spec = LightSpecFile.parse(spec_dict)
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"invalid light spec: {exc}")
        return spec, canonical_spec(spec_dict)

    def ensure_depth(pid: str) -> str:
        proj = get_project_or_404(pid)
        if proj.get("depth_blob"):
            return proj["depth_blob"]
        with project_lock(pid):
            proj = get_project_or_404(pid)
            if proj.get("depth_blob"):
                return proj["depth_blob"]
            depth = estimate_depth(load_source(proj))
            lo, hi = depth.values.min(), depth.values.max()
            norm = (depth.values - lo) / (hi - lo) if hi > lo else np.zeros_like(depth.values)
            key = store.put_blob(png_bytes(norm))
            store.update_project(pid, depth_blob=key)
            return key

    # -- job handlers -------------------------------------------------------

    def handle_depth(job: dict) -> str:
        return ensure_depth(job["project_id"])

    def handle_relight(job: dict) -> str:
        payload = json.loads(store.get_blob(job["fingerprint"].split(":")[1]))
        pid = job["project_id"]
        proj = get_project_or_404(pid)
        spec = LightSpecFile.parse(payload["light_spec"])
        gcfg = guidance_from_overrides(payload.get("guidance", {}))
        image = load_source(proj)
        h, w = image.shape[:2]
        rcfg = RenderConfig(resolution=(w, h), samples_per_pixel=config.full_spp, rng_seed=0)
        cond, edge = condition_from_image(image, spec, render_cfg=rcfg)
        store.update_job(job["id"], progress=0.2)
        cache = engine.source_cache(proj, gcfg)
        store.update_job(job["id"], progress=0.5)
        result = relight(engine.backbone, cache, to_gray(cond.pixels), engine.adapter, gcfg)
        blob = store.put_blob(png_bytes(result))
        sidecar = {
            "project_id": pid,
            "prompt": proj["prompt"],
            "seed": proj["seed"],
            "light_spec": payload["light_spec"],
            "guidance": gcfg.to_sidecar(),  # echoes the resolved gamma window
            "condition_blob": store.put_blob(png_bytes(cond.pixels)),
            "edge_blob": store.put_blob(png_bytes(edge.pixels)),
        }
        with project_lock(pid):
            proj = get_project_or_404(pid)
            rid = store.put_result(pid, blob, sidecar)
            store.update_project(pid, results=proj.get("results", []) + [rid])
        return rid

    jobs = JobQueue(
        store, {"depth": handle_depth, "relight": handle_relight}, config.workers
    )
    app.state.jobs = jobs

    # -- routes -------------------------------------------------------------

    @app.post("/projects", status_code=201)
    async def create_project(
        image: UploadFile, prompt: str = "", seed: int = 0, steps: int = 50, cfg: float = 7.5
    ):
        data = await image.read()
        if not data:
            raise HTTPException(status_code=400, detail="empty upload")
        try:
            decoded = decode_png(data)
        except Exception:
            raise HTTPException(status_code=400, detail="image does not decode")
        if steps < 1 or cfg < 0:
            raise HTTPException(status_code=400, detail="invalid generation params")
        key = store.put_blob(data)
        proj = store.create_project(
            {
                "prompt": prompt,
                "seed": int(seed),
                "steps": int(steps),
                "cfg": float(cfg),
                "source_blob": key,
                "width": int(decoded.shape[1]),
                "height": int(decoded.shape[0]),
                "light_spec_history": [],
                "results": [],
            }
        )
        return proj

    @app.get("/projects/{pid}")
    def get_project(pid: str):
        return get_project_or_404(pid)

    @app.post("/projects/{pid}/depth", status_code=202)
    def post_depth(pid: str):
        get_project_or_404(pid)
        fingerprint = f"depth:{pid}"
        existing = store.active_job(fingerprint)
        if existing:
            return existing
        job = store.create_job(pid, "depth", fingerprint)
        jobs.submit(job)
        return job

    @app.post("/projects/{pid}/preview")
    async def post_preview(pid: str, request: Request):
        proj = get_project_or_404(pid)
        body = await request.json()
        spec, canon = parse_spec(body)
        ensure_depth(pid)
        data = render_condition_bytes(load_source(proj), spec, config.preview_spp)
        key = store.put_blob(data)
        # spec text stored verbatim so clients can re-fetch identical bytes
        raw = body.get("light_spec", body)
        with project_lock(pid):
            proj = get_project_or_404(pid)
            history = proj.get("light_spec_history", [])
            entry = {"spec": raw, "canonical": canon, "preview_blob": key}
            if not history or history[-1]["canonical"] != canon:
                store.update_project(pid, light_spec_history=history + [entry])
        return Response(content=data, media_type="image/png", headers={"X-Blob": key})

    @app.post("/projects/{pid}/relight", status_code=202)
    async def post_relight(pid: str, request: Request):
        get_project_or_404(pid)
        if not config.adapter_path:
            raise HTTPException(status_code=503, detail="adapter checkpoint not configured")
        body = await request.json()
        spec, canon = parse_spec(body)
        try:
            gcfg = guidance_from_overrides(body.get("guidance", {}))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        payload = {"light_spec": body.get("light_spec", body), "guidance": body.get("guidance", {})}
        payload_blob = store.put_blob(json.dumps(payload, sort_keys=True).encode())
        del canon, gcfg  # validated above; the payload blob is the fingerprint
        fingerprint = f"relight:{payload_blob}:{pid}"
        if store.active_job(fingerprint):
            raise HTTPException(status_code=409, detail="identical job already running")
        job = store.create_job(pid, "relight", fingerprint)
        jobs.submit(job)
        return job

    @app.get("/jobs/{jid}")
    def get_job(jid: str):
        job = store.get_job(jid)
        if job is None:
            raise HTTPException(status_code=404, detail="unknown job")
        return job

    @app.get("/results/{rid}")
    def get_result(rid: str):
        res = store.get_result(rid)
        if res is None:
            raise HTTPException(status_code=404, detail="unknown result")
        return Response(content=store.get_blob(res["image_blob"]), media_type="image/png")

    @app.get("/results/{rid}/sidecar")
    def get_sidecar(rid: str):
        res = store.get_result(rid)
        if res is None:
            raise HTTPException(status_code=404, detail="unknown result")
        return json.loads(res["sidecar"])

    return app


def main(config: ServiceConfig | None = None):  # pragma: no cover - network entry
    import uvicorn

    config = config or ServiceConfig.from_env()
    uvicorn.run(create_app(config), host="0.0.0.0", port=config.port)
