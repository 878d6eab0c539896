"""Loopback HTTP review service for fit verdicts.

Serves pending fit records of a bootstrapping run so a human (or the browser
inspection UI) can examine each deformed mesh with its per-vertex errors and
accept or reject it. Verdicts persist through the run's file-backed state, so
they survive restarts; repeat submissions by the same author are idempotent
and differing re-reviews replace the prior verdict with an audit entry.
"""

from __future__ import annotations

import json

from fastapi import FastAPI, HTTPException, Response
from pydantic import BaseModel

from .pipeline import BootstrapState


class VerdictBody(BaseModel):
    verdict: str  # "accepted" | "rejected"
    author: str


def create_app(state: BootstrapState) -> FastAPI:
    app = FastAPI(title="bodyfit review service")
    app.state.bootstrap = state

    def _record(record_id):
        rec = state.records.get(record_id)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"unknown record {record_id!r}")
        return rec

    @app.get("/rounds/{round_index}/pending")
    def pending(round_index: int):
        recs = sorted(state.pending(round_index), key=lambda r: r.record_id)
        return [{
            "record_id": r.record_id,
            "scan_id": r.scan_id,
            "round_index": r.round_index,
            "summary": r.summary,
            "verdict": r.verdict,
        } for r in recs]

    @app.get("/records/{record_id}")
    def record(record_id: str):
        r = _record(record_id)
        return {
            "record_id": r.record_id,
            "scan_id": r.scan_id,
            "round_index": r.round_index,
            "summary": r.summary,
            "verdict": r.verdict,
            "verdict_author": r.verdict_author,
        }

    @app.get("/records/{record_id}/mesh")
    def mesh(record_id: str):
        rec = _record(record_id)
        data = (state.run_dir / rec.mesh_path).read_bytes()
        return Response(content=data, media_type="application/octet-stream")

    @app.get("/records/{record_id}/errors")
    def errors(record_id: str):
        rec = _record(record_id)
        return json.loads((state.run_dir / rec.errors_path).read_text())

    @app.get("/records/{record_id}/scan")
    def scan(record_id: str):
        rec = _record(record_id)
        entry = next((e for e in state.manifest["scans"] if e["id"] == rec.scan_id), None)
        if entry is None:
            raise HTTPException(status_code=404, detail="scan not in manifest")
        path = state.manifest["dataset_dir"] + "/" + entry["scan_path"]
        return Response(content=open(path, "rb").read(),
                        media_type="application/octet-stream")

    @app.post("/records/{record_id}/verdict")
    def verdict(record_id: str, body: VerdictBody):
        _record(record_id)
        try:
            rec = state.records[record_id]
            rec = state.set_verdict(record_id, body.verdict, body.author)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        state.save()
        return {"record_id": rec.record_id, "verdict": rec.verdict,
                "author": rec.verdict_author}

    return app


def serve(state: BootstrapState, host="127.0.0.1", port=8321):
    import uvicorn

    uvicorn.run(create_app(state), host=host, port=port, log_level="warning")
