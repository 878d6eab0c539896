import json

import pytest

from bodyfit.pipeline import (BootstrapState, FitRecord, PipelineConfig,
                              PipelineError, auto_verdicts, file_hash,
                              finalize_round, ingest, run_pipeline, run_round)
from bodyfit.synth import synth_corpus


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "corpus"
    synth_corpus(out, dims=2, size=5, template_vertices=300, seed=11,
                 noise_sigma=0.3, points_factor=6)
    return out


@pytest.fixture(scope="module")
def run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = PipelineConfig(rounds=2, n_components=3, accept_mean_mm=20.0,
                         accept_valid_fraction=0.85)
    return run_pipeline(dataset, out, cfg)


class TestIngest:
    def test_counts_and_exclusion_reasons(self, dataset, tmp_path):
        import shutil

        broken = tmp_path / "broken"
        shutil.copytree(dataset, broken)
        (broken / "scans" / "synth_0001_landmarks.json").unlink()
        (broken / "scans" / "synth_0002.ply").write_bytes(b"not a ply file")
        manifest = ingest(broken)
        assert len(manifest["scans"]) == 3
        reasons = {e["id"]: e["reason"] for e in manifest["excluded"]}
        assert reasons == {"synth_0001": "missing landmarks",
                           "synth_0002": "parse failure"}

    def test_clean_corpus_has_no_exclusions(self, dataset):
        manifest = ingest(dataset)
        assert len(manifest["scans"]) == 5
        assert manifest["excluded"] == []
        assert all(e["n_points"] > 0 for e in manifest["scans"])

    def test_empty_dataset_rejected(self, tmp_path):
        (tmp_path / "scans").mkdir()
        with pytest.raises(PipelineError, match="no usable scans"):
            ingest(tmp_path)


class TestVerdicts:
    def make_state(self, tmp_path):
        state = BootstrapState(tmp_path / "run", {"dataset_dir": ".", "scans": []})
        rec = FitRecord(record_id="r0_a", scan_id="a", round_index=0,
                        init_source="template", summary={},
                        mesh_path="m.ply", errors_path="e.json")
        state.records[rec.record_id] = rec
        state.save_record(rec)
        return state

    def audit_lines(self, state):
        p = state.run_dir / "audit.log"
        return [json.loads(l) for l in p.read_text().splitlines()] if p.exists() else []

    def test_accept_then_repeat_is_idempotent(self, tmp_path):
        state = self.make_state(tmp_path)
        state.set_verdict("r0_a", "accepted", "alice")
        state.set_verdict("r0_a", "accepted", "alice")
        assert state.records["r0_a"].verdict == "accepted"
        assert len(self.audit_lines(state)) == 1

    def test_re_review_replaces_and_audits(self, tmp_path):
        state = self.make_state(tmp_path)
        state.set_verdict("r0_a", "accepted", "alice")
        state.set_verdict("r0_a", "rejected", "bob")
        rec = state.records["r0_a"]
        assert rec.verdict == "rejected" and rec.verdict_author == "bob"
        lines = self.audit_lines(state)
        assert lines[-1]["from"] == "accepted" and lines[-1]["to"] == "rejected"

    def test_invalid_inputs_rejected(self, tmp_path):
        state = self.make_state(tmp_path)
        with pytest.raises(ValueError, match="invalid verdict"):
            state.set_verdict("r0_a", "maybe", "alice")
        with pytest.raises(KeyError, match="unknown record"):
            state.set_verdict("nope", "accepted", "alice")

    def test_verdict_survives_reload(self, tmp_path):
        state = self.make_state(tmp_path)
        state.set_verdict("r0_a", "accepted", "alice")
        state.save()
        back = BootstrapState.load(state.run_dir)
        assert back.records["r0_a"].verdict == "accepted"


class TestRounds:
    def test_records_start_pending_with_artifacts(self, run):
        recs = run.round_records(0)
        assert len(recs) == 5
        for rec in recs:
            assert rec.init_source == "template"
            assert (run.run_dir / rec.mesh_path).exists()
            errs = json.loads((run.run_dir / rec.errors_path).read_text())
            assert len(errs) == 300
            assert rec.content_hash

    def test_later_rounds_initialize_from_prior_space(self, run):
        space_hash = file_hash(run.run_dir / run.space_paths[0])
        for rec in run.round_records(1):
            assert rec.init_source == f"space:{space_hash}"

    def test_provenance_closes_over_accepted_hashes(self, run):
        from bodyfit.sscape import load_space

        space = load_space(run.run_dir / run.space_paths[0])
        expected = sorted(r.content_hash for r in run.accepted(0))
        assert space.provenance["record_hashes"] == expected
        assert space.provenance["round"] == 0

    def test_survivors_recorded_per_round(self, run):
        assert len(run.survivor_counts) == 2
        assert all(c >= 2 for c in run.survivor_counts)

    def test_finalize_requires_all_verdicts(self, dataset, tmp_path):
        state = BootstrapState(tmp_path / "r", ingest(dataset),
                               PipelineConfig(rounds=1, n_components=2))
        run_round(state)
        with pytest.raises(PipelineError, match="pending verdicts"):
            finalize_round(state)

    def test_too_few_accepted_yields_diagnostic(self, dataset, tmp_path):
        cfg = PipelineConfig(rounds=1, n_components=2, accept_mean_mm=1e-9)
        state = run_pipeline(dataset, tmp_path / "r", cfg)
        assert state.round_index == 0
        assert "need >= 2" in state.diagnostic
        assert state.space_paths == []

    def test_replay_is_bit_identical(self, dataset, run, tmp_path):
        cfg = PipelineConfig(rounds=2, n_components=3, accept_mean_mm=20.0,
                             accept_valid_fraction=0.85)
        other = run_pipeline(dataset, tmp_path / "replay", cfg)
        a = {r.record_id: r.content_hash for r in run.records.values()}
        b = {r.record_id: r.content_hash for r in other.records.values()}
        assert a == b
        for pa, pb in zip(run.space_paths, other.space_paths):
            assert (run.run_dir / pa).read_bytes() == (other.run_dir / pb).read_bytes()
