"""HTTP intervention service backing the interactive painting UI.

Sessions are in-memory: each holds a seed, the latent it implies, and an
ordered edit stack. The rendered image is always reproduced by replaying the
stack from the latent, so undo is a pop plus replay and a serialized session
document replays to bit-identical images. Per-session edits are serialized
by a lock; rendering itself is pure.
"""

from __future__ import annotations

import base64
import hashlib
import os
import threading
import uuid
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import HTMLResponse, JSONResponse
from pydantic import BaseModel, Field

from . import dissect as dissectmod
from . import intervene as intmod
from . import persist, scenes, segment, weights
from .nn import NetworkSpec, forward, forward_from, infer_shapes


class BrushModel(BaseModel):
    points: List[List[int]] = Field(min_length=1)
    radius: int = Field(default=6, ge=1, le=64)


class UnitsSourceModel(BaseModel):
    source: Literal["alpha", "explicit"] = "alpha"
    n: int = Field(default=20, ge=1)
    units: Optional[List[int]] = None


class EditModel(BaseModel):
    op: Literal["insert", "ablate", "undo", "reset"]
    concept: Optional[str] = None
    brush: Optional[BrushModel] = None
    units_source: UnitsSourceModel = Field(default_factory=UnitsSourceModel)


class SessionRequest(BaseModel):
    seed: int = 0


@dataclass
class ConceptAssets:
    name: str
    k: np.ndarray
    causal_units: List[int]


@dataclass
class Session:
    id: str
    seed: int
    z: np.ndarray
    edits: List[dict] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        self.status = status
        self.code = code
        self.message = message
        super().__init__(message)


def _b64_png(image: np.ndarray) -> tuple:
    png = persist.encode_png(image)
    return (base64.b64encode(png).decode("ascii"),
            hashlib.sha256(png).hexdigest())


class ServiceState:
    def __init__(self, net: NetworkSpec, universe, assets: Dict[str, ConceptAssets]):
        self.net = net
        self.universe = universe
        self.assets = assets
        self.sessions: Dict[str, Session] = {}
        shapes = infer_shapes(net)
        self.feat_size = shapes[net.split_index - 1][1]
        self.image_size = shapes[-1][1]
        self.block = self.image_size // self.feat_size
        self.baselines = None       # computed lazily for /trace

    def brush_cells(self, brush: BrushModel) -> List[tuple]:
        cells = set()
        size, block = self.image_size, self.block
        for x, y in brush.points:
            if not (0 <= x < size and 0 <= y < size):
                raise ApiError(422, "invalid_brush",
                               f"point ({x}, {y}) outside {size}x{size} image")
            r = brush.radius
            for pr in range(max(0, (y - r) // block), min(self.feat_size, (y + r) // block + 1)):
                for pc in range(max(0, (x - r) // block), min(self.feat_size, (x + r) // block + 1)):
                    # inclusive mapping: the cell joins if its footprint
                    # rectangle intersects the brush disc
                    cx = min(max(x, pc * block), pc * block + block - 1)
                    cy = min(max(y, pr * block), pr * block + block - 1)
                    if (cx - x) ** 2 + (cy - y) ** 2 <= r * r:
                        cells.add((pr, pc))
        if not cells:
            raise ApiError(422, "invalid_brush", "brush touches no featuremap cell")
        return sorted(cells)

    def resolve_units(self, concept: str, src: UnitsSourceModel) -> List[int]:
        if src.source == "explicit":
            if not src.units:
                raise ApiError(422, "invalid_units", "explicit source requires units")
            bad = [u for u in src.units if not 0 <= u < 64]
            if bad:
                raise ApiError(422, "invalid_units", f"unit indices out of range: {bad}")
            return sorted(set(src.units))
        assets = self.assets.get(concept)
        if assets is None:
            raise ApiError(422, "unknown_concept", f"no causal set for {concept!r}")
        return assets.causal_units[:src.n]

    def replay(self, session: Session) -> np.ndarray:
        r = forward(self.net, session.z).featuremap.copy()
        for edit in session.edits:
            units = edit["units"]
            cells = np.asarray(edit["cells"], dtype=int)
            if edit["op"] == "ablate":
                r = intmod.ablate(r, units, cells)
            else:
                r = intmod.insert(r, units, cells, self.assets[edit["concept"]].k)
        return r

    def render(self, session: Session) -> np.ndarray:
        return forward_from(self.net, self.replay(session))

    def delta_stats(self, before: np.ndarray, after: np.ndarray) -> Dict[str, int]:
        seg_b = segment.segment(before, self.universe)
        seg_a = segment.segment(after, self.universe)
        return {name: int(seg_a.masks[name].sum()) - int(seg_b.masks[name].sum())
                for name in self.universe.names}


def _precompute(net, universe, mode: str, seed: int,
                max_workers: Optional[int] = None) -> Dict[str, ConceptAssets]:
    """Per-concept insertion constants and causal unit sets, at server start."""
    val = scenes.sample_z(seed + 91, 120, net.latent_dim)
    evl = scenes.sample_z(seed + 92, 300, net.latent_dim)
    report = dissectmod.label_units(net, universe, val, evl, min_val=100,
                                    min_eval=300, with_parts=False)
    from concurrent.futures import ThreadPoolExecutor
    from .cli import worker_count

    def build(name: str) -> Optional[ConceptAssets]:
        try:
            k = intmod.compute_k(net, universe, name,
                                 scenes.sample_z(seed + 93, 200, net.latent_dim))
        except intmod.ZeroBaseRateError:
            return None
        if mode == "alpha":
            init = intmod.alpha_init_from_report(report, name)
            config = intmod.AceConfig(steps=15, minibatch=16, blocks=4, batch_z=4,
                                      seed=seed)
            alpha = intmod.optimize_alpha(net, universe, name, k.k, init, config).alpha
        else:
            alpha = np.asarray(report.ious[name], dtype=np.float32)
        order = np.argsort(-alpha, kind="stable")
        # top-20 components, dropping near-zero stragglers: inserting units
        # with no causal weight would only drag scene context along
        floor = 0.3 * float(alpha[order[0]])
        causal = [int(u) for u in order[:20] if alpha[u] >= floor]
        return ConceptAssets(name=name, k=k.k, causal_units=causal)

    workers = max_workers or worker_count()
    assets = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for name, result in zip(universe.names, pool.map(build, universe.names)):
            if result is not None:
                assets[name] = result
    return assets


def create_app(model_path, universe_path=None, precompute: str = "alpha",
               seed: int = 0, frontend_dir=None) -> FastAPI:
    net = weights.load_weights(model_path)
    universe = (segment.ConceptUniverse.load(universe_path) if universe_path
                else scenes.default_universe())
    assets = _precompute(net, universe, precompute, seed)
    state = ServiceState(net, universe, assets)
    app = FastAPI(title="gendissect service")
    app.state.gd = state

    @app.exception_handler(ApiError)
    async def api_error_handler(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code, "message": exc.message})

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=422,
                            content={"code": "invalid_request",
                                     "message": "request validation failed",
                                     "errors": exc.errors()})

    def get_session(session_id: str) -> Session:
        session = state.sessions.get(session_id)
        if session is None:
            raise ApiError(404, "unknown_session", f"no session {session_id!r}")
        return session

    @app.get("/api/meta")
    def meta():
        return {"schema": "gd/1", "kind": "service-meta",
                "concepts": [{"name": name,
                              "causal_units": a.causal_units,
                              "size": len(a.causal_units)}
                             for name, a in state.assets.items()],
                "image_size": state.image_size, "feat_size": state.feat_size,
                "latent_dim": state.net.latent_dim}

    @app.post("/api/session")
    def create_session(req: SessionRequest):
        sid = uuid.uuid4().hex[:12]
        z = scenes.sample_z(req.seed, 1, state.net.latent_dim)[0]
        session = Session(id=sid, seed=req.seed, z=z)
        state.sessions[sid] = session
        image, checksum = _b64_png(state.render(session))
        return {"session_id": sid, "image": image, "checksum": checksum,
                "width": state.image_size, "height": state.image_size, "depth": 0}

    @app.get("/api/session/{session_id}")
    def export_session(session_id: str):
        session = get_session(session_id)
        return {"schema": "gd/1", "kind": "session", "session_id": session.id,
                "seed": session.seed,
                "edits": [{k: v for k, v in e.items()} for e in session.edits]}

    @app.post("/api/session/{session_id}/edit")
    def edit(session_id: str, cmd: EditModel):
        session = get_session(session_id)
        with session.lock:
            if cmd.op == "undo":
                return _undo(session)
            if cmd.op == "reset":
                session.edits.clear()
                image, checksum = _b64_png(state.render(session))
                return {"image": image, "checksum": checksum, "depth": 0,
                        "delta_stats": {}}
            if cmd.concept is None or cmd.brush is None:
                raise ApiError(422, "invalid_edit",
                               f"op {cmd.op!r} requires concept and brush")
            if cmd.concept not in state.universe.names:
                raise ApiError(422, "unknown_concept",
                               f"concept {cmd.concept!r} not in universe")
            cells = state.brush_cells(cmd.brush)
            units = state.resolve_units(cmd.concept, cmd.units_source)
            before = state.render(session)
            session.edits.append({"op": cmd.op, "concept": cmd.concept,
                                  "units": units, "cells": [list(c) for c in cells]})
            after = state.render(session)
            image, checksum = _b64_png(after)
            # count changes the client can see: compare quantized images
            q_before = persist.image_to_uint8(before).astype(np.int16)
            q_after = persist.image_to_uint8(after).astype(np.int16)
            changed = int((np.abs(q_after - q_before).max(axis=2) > 1).sum())
            return {"image": image, "checksum": checksum,
                    "depth": len(session.edits),
                    "delta_stats": state.delta_stats(before, after),
                    "changed_pixels": changed}

    def _undo(session: Session):
        if not session.edits:
            raise ApiError(422, "empty_stack", "nothing to undo")
        session.edits.pop()
        image, checksum = _b64_png(state.render(session))
        return {"image": image, "checksum": checksum, "depth": len(session.edits),
                "delta_stats": {}}

    @app.post("/api/session/{session_id}/undo")
    def undo(session_id: str):
        session = get_session(session_id)
        with session.lock:
            return _undo(session)

    @app.get("/api/session/{session_id}/trace")
    def trace(session_id: str):
        session = get_session(session_id)
        with session.lock:
            if not session.edits:
                raise ApiError(422, "empty_stack", "no edit to trace")
            if state.baselines is None:
                state.baselines = intmod.layer_baselines(
                    state.net, scenes.sample_z(990, 40, state.net.latent_dim))
            head = Session(id="tmp", seed=session.seed, z=session.z,
                           edits=session.edits[:-1])
            r_before = state.replay(head)
            r_after = state.replay(session)
            # profile of the last edit: resume from the pre-edit featuremap
            base = forward_from(state.net, r_before, trace=True)[1]
            mod = forward_from(state.net, r_after, trace=True)[1]
            per_layer = []
            kinds = [l.kind for l in state.net.layers[state.net.split_index:]]
            for t0, t1, ch in zip(base, mod, state.baselines):
                change = np.abs(t1.astype(np.float64) - t0.astype(np.float64)).mean(axis=(-2, -1))
                per_layer.append(float(np.mean(change / (ch + 1e-9))))
            feat_idx = max(0, len(base) - 3)
            heat = np.abs(mod[feat_idx].astype(np.float64)
                          - base[feat_idx].astype(np.float64)).mean(axis=0)
            img_l1 = float(np.abs(mod[-1].astype(np.float64)
                                  - base[-1].astype(np.float64)).mean())
            ref = float(np.abs(base[-1].astype(np.float64)).mean())
            return {"schema": "gd/1", "kind": "trace", "per_layer": per_layer,
                    "layer_kinds": kinds,
                    "heatmap": [[float(v) for v in row] for row in heat],
                    "visible": img_l1 > 0.02 * ref, "image_l1_change": img_l1}

    if frontend_dir and os.path.isdir(frontend_dir):
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="ui")

    return app
