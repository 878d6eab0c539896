"""Bootstrapping pipeline: ingest, batch fitting, verdicts, per-round learning.

All state lives as plain files under a run directory (JSON records + binary
mesh files), so a run can be inspected, diffed, and replayed. A round fits
every usable scan, persists the results as pending records, collects verdicts
(auto-policy or the review service), and learns the next space from the
accepted records only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import nrd, sscape
from .align import align_scan_to_template
from .geom import Scan
from .meshio import (read_ply, read_scan, read_scan_landmarks, read_template,
                     write_ply)


class PipelineError(RuntimeError):
    pass


VERDICTS = ("pending", "accepted", "rejected")


@dataclass
class PipelineConfig:
    rounds: int = 5
    n_components: int = 10
    seed_space: str | None = None  # path; round-0 initialization when given
    accept_mean_mm: float = 5.0
    accept_valid_fraction: float = 0.95
    init_alternations: int = 5  # fit_to_scan cap when initializing from a space


@dataclass
class FitRecord:
    record_id: str
    scan_id: str
    round_index: int
    init_source: str  # "template" | "space:<sha256 of the space file>"
    summary: dict
    mesh_path: str  # relative to the run directory
    errors_path: str
    content_hash: str = ""
    verdict: str = "pending"
    verdict_author: str | None = None
    verdict_time: str | None = None

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_hash(path) -> str:
    return _sha256(Path(path).read_bytes())


def ingest(dataset_dir):
    """Corpus manifest for a dataset directory of scans + landmark files.

    Scans lacking a landmark file or failing to parse are excluded with a
    reason. Raises when nothing usable remains.
    """
    dataset_dir = Path(dataset_dir)
    scans_dir = dataset_dir / "scans"
    usable, excluded = [], []
    for ply in sorted(scans_dir.glob("*.ply")):
        sid = ply.stem
        lm_path = scans_dir / f"{sid}_landmarks.json"
        if not lm_path.exists():
            excluded.append({"id": sid, "reason": "missing landmarks"})
            continue
        try:
            pts = read_ply(ply)["points"]
            lms = read_scan_landmarks(lm_path)
        except Exception:
            excluded.append({"id": sid, "reason": "parse failure"})
            continue
        usable.append({
            "id": sid,
            "scan_path": str(ply.relative_to(dataset_dir)),
            "landmarks_path": str(lm_path.relative_to(dataset_dir)),
            "n_points": int(len(pts)),
            "landmarks": sorted(lms),
        })
    if not usable:
        raise PipelineError(f"no usable scans in {dataset_dir}")
    return {"dataset_dir": str(dataset_dir), "scans": usable, "excluded": excluded}


class BootstrapState:
    """Rounds, records, and verdicts of one bootstrapping run, file-backed."""

    def __init__(self, run_dir, manifest, config: PipelineConfig | None = None):
        self.run_dir = Path(run_dir)
        self.manifest = manifest
        self.config = config or PipelineConfig()
        self.round_index = 0
        self.survivor_counts: list[int] = []
        self.space_paths: list[str] = []  # one per completed round
        self.records: dict[str, FitRecord] = {}
        self.diagnostic: str | None = None
        self.run_dir.mkdir(parents=True, exist_ok=True)

    # -- persistence ------------------------------------------------------

    def _record_path(self, rec: FitRecord) -> Path:
        d = self.run_dir / f"rounds/r{rec.round_index}/records"
        return d / f"{rec.record_id}.json"

    def save_record(self, rec: FitRecord):
        p = self._record_path(rec)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(rec.to_json())

    def save(self):
        meta = {
            "round_index": self.round_index,
            "survivor_counts": self.survivor_counts,
            "space_paths": self.space_paths,
            "diagnostic": self.diagnostic,
            "manifest": self.manifest,
            "config": asdict(self.config),
        }
        (self.run_dir / "state.json").write_text(
            json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, run_dir) -> "BootstrapState":
        run_dir = Path(run_dir)
        meta = json.loads((run_dir / "state.json").read_text())
        state = cls(run_dir, meta["manifest"], PipelineConfig(**meta["config"]))
        state.round_index = meta["round_index"]
        state.survivor_counts = meta["survivor_counts"]
        state.space_paths = meta["space_paths"]
        state.diagnostic = meta["diagnostic"]
        for p in sorted(run_dir.glob("rounds/r*/records/*.json")):
            rec = FitRecord.from_json(p.read_text())
            state.records[rec.record_id] = rec
        return state

    def _audit(self, entry: dict):
        with open(self.run_dir / "audit.log", "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    # -- verdicts ----------------------------------------------------------

    def set_verdict(self, record_id, verdict, author):
        """Record a verdict; idempotent per (record, author, verdict), and a
        differing re-review replaces the prior verdict with an audit entry."""
        if verdict not in ("accepted", "rejected"):
            raise ValueError(f"invalid verdict {verdict!r}")
        rec = self.records.get(record_id)
        if rec is None:
            raise KeyError(f"unknown record {record_id!r}")
        if rec.verdict == verdict and rec.verdict_author == author:
            return rec  # repeat submission; nothing to do
        entry = {
            "record_id": record_id,
            "round": rec.round_index,
            "from": rec.verdict,
            "to": verdict,
            "author": author,
            "time": datetime.now(timezone.utc).isoformat(),
        }
        rec.verdict = verdict
        rec.verdict_author = author
        rec.verdict_time = entry["time"]
        self.save_record(rec)
        self._audit(entry)
        return rec

    def round_records(self, round_index):
        return [r for r in self.records.values() if r.round_index == round_index]

    def pending(self, round_index):
        return [r for r in self.round_records(round_index) if r.verdict == "pending"]

    def accepted(self, round_index):
        return [r for r in self.round_records(round_index) if r.verdict == "accepted"]


def _load_template(dataset_dir):
    d = Path(dataset_dir) / "template"
    template = read_template(d / "template.obj", d / "landmarks.json",
                             d / "region_masks.json")
    joint_schema = json.loads((d / "joint_schema.json").read_text())
    return template, joint_schema


def _load_scan(dataset_dir, entry) -> Scan:
    dataset_dir = Path(dataset_dir)
    scan = read_scan(dataset_dir / entry["scan_path"], id=entry["id"])
    scan.landmarks = read_scan_landmarks(dataset_dir / entry["landmarks_path"])
    return scan


def run_round(state: BootstrapState, template=None, joint_schema=None) -> BootstrapState:
    """Fit every manifest scan for the current round; records start pending.

    Round 0 initializes from the template (or a seed space when configured);
    later rounds initialize by fitting the previous round's learned space to
    the scan and handing its reconstruction to the non-rigid fitter.
    """
    cfg = state.config
    r = state.round_index
    dataset_dir = state.manifest["dataset_dir"]
    if template is None:
        template, joint_schema = _load_template(dataset_dir)

    space = None
    init_source = "template"
    if r > 0:
        if len(state.space_paths) < r:
            raise PipelineError(f"round {r - 1} has no learned space")
        space_path = state.run_dir / state.space_paths[r - 1]
        space = sscape.load_space(space_path)
        init_source = f"space:{file_hash(space_path)}"
    elif cfg.seed_space:
        space = sscape.load_space(cfg.seed_space)
        init_source = f"space:{file_hash(cfg.seed_space)}"

    mesh_dir = state.run_dir / f"rounds/r{r}/meshes"
    err_dir = state.run_dir / f"rounds/r{r}/errors"
    mesh_dir.mkdir(parents=True, exist_ok=True)
    err_dir.mkdir(parents=True, exist_ok=True)

    for entry in state.manifest["scans"]:
        scan = _load_scan(dataset_dir, entry)
        scan, _ = align_scan_to_template(scan, template)
        initial = None
        if space is not None:
            try:
                _, _, init_fit = sscape.fit_to_scan(
                    space, scan, max_alternations=cfg.init_alternations)
                initial = init_fit.deformed_vertices
            except nrd.FitError:
                initial = None  # fall back to the bare template
        result = nrd.fit(template, scan, initial_vertices=initial)

        rid = f"r{r}_{entry['id']}"
        mesh_path = mesh_dir / f"{entry['id']}.ply"
        write_ply(mesh_path, result.deformed_vertices, faces=template.faces)
        errs = [None if np.isnan(e) else float(e) for e in result.per_vertex_error]
        err_path = err_dir / f"{entry['id']}.json"
        err_path.write_text(json.dumps(errs))
        rec = FitRecord(
            record_id=rid,
            scan_id=entry["id"],
            round_index=r,
            init_source=init_source,
            summary=result.summary,
            mesh_path=str(mesh_path.relative_to(state.run_dir)),
            errors_path=str(err_path.relative_to(state.run_dir)),
        )
        rec.content_hash = _sha256(
            json.dumps({
                "scan_id": rec.scan_id,
                "round_index": rec.round_index,
                "init_source": rec.init_source,
                "summary": rec.summary,
            }, sort_keys=True).encode() + mesh_path.read_bytes())
        state.records[rid] = rec
        state.save_record(rec)
    state.save()
    return state


def auto_verdicts(state: BootstrapState, author="auto-policy"):
    """Headless verdict policy: accept iff the fit is tight and near-complete.

    The thresholds stand in for the human inspection the review service
    exists for; reports flag records judged this way via the author field.
    """
    cfg = state.config
    for rec in state.pending(state.round_index):
        ok = (rec.summary["mean_error"] < cfg.accept_mean_mm
              and rec.summary["valid_fraction"] > cfg.accept_valid_fraction)
        state.set_verdict(rec.record_id, "accepted" if ok else "rejected", author)
    state.save()
    return state


def finalize_round(state: BootstrapState, template=None, joint_schema=None):
    """Learn the round's space from accepted records and advance the round.

    With fewer than 2 accepted records the round is not advanced and no space
    is written; the state carries a diagnostic instead.
    """
    r = state.round_index
    accepted = sorted(state.accepted(r), key=lambda rec: rec.record_id)
    if state.pending(r):
        raise PipelineError(f"round {r} still has pending verdicts")
    if len(accepted) < 2:
        state.diagnostic = (f"round {r}: only {len(accepted)} accepted records; "
                            "need >= 2 to learn a space")
        state.save()
        return state
    if template is None:
        template, joint_schema = _load_template(state.manifest["dataset_dir"])
    meshes = []
    for rec in accepted:
        meshes.append(read_ply(state.run_dir / rec.mesh_path)["points"])
    space = sscape.learn(meshes, state.config.n_components, template, joint_schema)
    space.provenance = {
        "round": r,
        "record_hashes": sorted(rec.content_hash for rec in accepted),
    }
    space_path = state.run_dir / f"rounds/r{r}/space.bin"
    sscape.save_space(space_path, space)
    state.space_paths.append(str(space_path.relative_to(state.run_dir)))
    state.survivor_counts.append(len(accepted))
    state.diagnostic = None
    state.round_index = r + 1
    state.save()
    return state


def run_pipeline(dataset_dir, out_dir, config: PipelineConfig | None = None,
                 verdict_author="auto-policy"):
    """Headless end-to-end run: ingest, then fit/verdict/learn per round."""
    config = config or PipelineConfig()
    manifest = ingest(dataset_dir)
    state = BootstrapState(out_dir, manifest, config)
    template, joint_schema = _load_template(dataset_dir)
    state.save()
    for _ in range(config.rounds):
        run_round(state, template, joint_schema)
        auto_verdicts(state, author=verdict_author)
        finalize_round(state, template, joint_schema)
        if state.diagnostic is not None:
            break
    return state
