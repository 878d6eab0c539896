"""Command-line interface: registration, shape spaces, normalization,
evaluation, bootstrapping, synthetic data, and the review service."""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from . import nrd, pipeline, posture, sscape, stateval
from .align import align_scan_to_template
from .meshio import (read_obj, read_ply, read_scan, read_scan_landmarks,
                     read_template, write_obj, write_ply)
from .skeleton import Pose


def _load_nrd_config(path):
    if path is None:
        return None
    d = json.loads(Path(path).read_text())
    weights = nrd.NrdWeights(**{k: d[k] for k in
                                ("alpha", "beta", "gamma", "relax_factor", "beta_floor")
                                if k in d})
    return nrd.NrdConfig(weights=weights)


def _load_pose(path, n_joints):
    if path is None:
        return Pose.rest(n_joints)
    d = json.loads(Path(path).read_text())
    return Pose(rotations=np.asarray(d["rotations"], dtype=np.float64),
                root_translation=np.asarray(d.get("root_translation", [0, 0, 0]),
                                            dtype=np.float64))


def _load_mesh_vertices(path):
    path = Path(path)
    if path.suffix == ".obj":
        return read_obj(path)[0]
    return read_ply(path)["points"]


def _mesh_files(directory):
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix in (".obj", ".ply"))
    if not files:
        raise click.ClickException(f"no mesh files in {directory}")
    return files


@click.group()
def main():
    """Body-scan registration and statistical shape-space toolkit."""


@main.command()
@click.option("--template", "template_path", required=True, type=click.Path(exists=True))
@click.option("--template-landmarks", required=True, type=click.Path(exists=True))
@click.option("--scan", "scan_path", required=True, type=click.Path(exists=True))
@click.option("--scan-landmarks", required=True, type=click.Path(exists=True))
@click.option("--init", "init_spec", default="template", show_default=True,
              help="'template' or a shape-space archive used for initialization")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--report", "report_path", type=click.Path())
def fit(template_path, template_landmarks, scan_path, scan_landmarks,
        init_spec, config_path, out, report_path):
    """Non-rigid registration of the template to a landmarked scan."""
    template = read_template(template_path, template_landmarks)
    scan = read_scan(scan_path)
    scan.landmarks = read_scan_landmarks(scan_landmarks)
    scan, _ = align_scan_to_template(scan, template)
    config = _load_nrd_config(config_path)
    initial = None
    if init_spec != "template":
        space = sscape.load_space(init_spec)
        _, _, init_fit = sscape.fit_to_scan(space, scan)
        initial = init_fit.deformed_vertices
    result = nrd.fit(template, scan, initial_vertices=initial, config=config)
    write_ply(out, result.deformed_vertices, faces=template.faces)
    if report_path:
        report = {
            "summary": result.summary,
            "energy_trace": result.energy_trace,
            "init": init_spec,
            "config": config_path and json.loads(Path(config_path).read_text()),
        }
        Path(report_path).write_text(json.dumps(report, indent=1, sort_keys=True))
    click.echo(f"mean error {result.summary['mean_error']:.3f} mm, "
               f"valid fraction {result.summary['valid_fraction']:.3f}")


@main.command()
@click.option("--fits", "fits_dir", required=True, type=click.Path(exists=True))
@click.option("--components", required=True, type=int)
@click.option("--template-dir", required=True, type=click.Path(exists=True),
              help="directory with template.obj, landmarks.json, region_masks.json, joint_schema.json")
@click.option("--out", required=True, type=click.Path())
def learn(fits_dir, components, template_dir, out):
    """Learn a shape space from registered meshes on the template topology."""
    d = Path(template_dir)
    template = read_template(d / "template.obj", d / "landmarks.json",
                             d / "region_masks.json")
    joint_schema = json.loads((d / "joint_schema.json").read_text())
    meshes = [_load_mesh_vertices(p) for p in _mesh_files(fits_dir)]
    space = sscape.learn(meshes, components, template, joint_schema)
    sscape.save_space(out, space)
    click.echo(f"learned {space.n_components} components from {len(meshes)} meshes -> {out}")


@main.command()
@click.option("--space", "space_path", required=True, type=click.Path(exists=True))
@click.option("--phi", required=True, help="comma-separated sigma-scaled coefficients")
@click.option("--pose", "pose_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def sample(space_path, phi, pose_path, out):
    """Reconstruct the body for given shape coefficients (and optional pose)."""
    space = sscape.load_space(space_path)
    coeffs = np.array([float(x) for x in phi.split(",")])
    pose = _load_pose(pose_path, len(space.skeleton.joints))
    verts = sscape.reconstruct(space, sscape.ShapeParams(coeffs), pose)
    write_obj(out, verts, space.template.faces)
    click.echo(f"wrote {out}")


@main.command()
@click.option("--space", "space_path", required=True, type=click.Path(exists=True))
@click.option("--scans", required=True, help="comma-separated scan PLY paths")
@click.option("--landmarks", required=True, help="comma-separated landmark JSON paths")
@click.option("--out", required=True, type=click.Path())
@click.option("--report", "report_path", type=click.Path())
def reconstruct(space_path, scans, landmarks, out, report_path):
    """Estimate one body from one or more (partial) scans."""
    space = sscape.load_space(space_path)
    scan_paths = scans.split(",")
    lm_paths = landmarks.split(",")
    if len(scan_paths) != len(lm_paths):
        raise click.ClickException("scans and landmarks lists differ in length")
    scan_list = []
    for sp, lp in zip(scan_paths, lm_paths):
        s = read_scan(sp)
        s.landmarks = read_scan_landmarks(lp)
        scan_list.append(s)
    shape, poses, results = sscape.fit_to_partial_scans(space, scan_list)
    verts = space.personalized(shape)
    write_obj(out, verts, space.template.faces)
    if report_path:
        report = {
            "phi": shape.coefficients.tolist(),
            "per_scan": [r.summary for r in results],
        }
        Path(report_path).write_text(json.dumps(report, indent=1, sort_keys=True))
    click.echo(f"phi = {np.round(shape.coefficients, 3).tolist()}")


@main.command()
@click.option("--method", type=click.Choice(["wsx", "nh"]), required=True)
@click.option("--fits", "fits_dir", required=True, type=click.Path(exists=True))
@click.option("--space", "space_path", required=True, type=click.Path(exists=True),
              help="shape-space archive providing the mean, skeleton, and skinning")
@click.option("--out", "out_dir", required=True, type=click.Path())
def normalize(method, fits_dir, space_path, out_dir):
    """Remove residual posture variation from registered meshes."""
    space = sscape.load_space(space_path)
    faces = space.template.faces
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    anchors = posture.root_anchors(space.skinning, space.skeleton)
    for p in _mesh_files(fits_dir):
        verts = _load_mesh_vertices(p)
        if method == "wsx":
            norm = posture.normalize_wsx(verts, space.mean_vertices, faces, anchors)
        else:
            norm = posture.normalize_nh(verts, faces, space.skeleton,
                                        space.skinning, space.mean_vertices)
        write_ply(out_dir / (p.stem + ".ply"), norm, faces=faces)
    click.echo(f"normalized ({method}) -> {out_dir}")


@main.command(name="eval")
@click.option("--fits", "fits_dir", required=True, type=click.Path(exists=True))
@click.option("--K", "k_list", default="1,5,10,20,50", show_default=True)
@click.option("--specificity-samples", default=1000, show_default=True, type=int)
@click.option("--seed", default=7, show_default=True, type=int)
@click.option("--reference", "reference_dir", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def eval_cmd(fits_dir, k_list, specificity_samples, seed, reference_dir, out):
    """Generalization and specificity curves for a corpus of registered meshes."""
    meshes = [_load_mesh_vertices(p) for p in _mesh_files(fits_dir)]
    reference = None
    if reference_dir:
        reference = [_load_mesh_vertices(p) for p in _mesh_files(reference_dir)]
    ks = [int(k) for k in k_list.split(",")]
    report = stateval.evaluate(meshes, ks, n_samples=specificity_samples,
                               seeds=(seed,), reference_corpus=reference,
                               reference_name=reference_dir)
    Path(out).write_text(report.to_json())
    click.echo(f"wrote {out}")


@main.command()
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--rounds", default=5, show_default=True, type=int)
@click.option("--seed-space", type=click.Path(exists=True))
@click.option("--verdict", "verdict_mode", type=click.Choice(["serve", "auto"]),
              default="auto", show_default=True)
@click.option("--components", default=10, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--port", default=8321, show_default=True, type=int)
def bootstrap(dataset_dir, rounds, seed_space, verdict_mode, components, out_dir, port):
    """Bootstrapping loop: fit all scans, collect verdicts, learn per round."""
    config = pipeline.PipelineConfig(rounds=rounds, n_components=components,
                                     seed_space=seed_space)
    if verdict_mode == "auto":
        state = pipeline.run_pipeline(dataset_dir, out_dir, config)
    else:
        from . import service

        manifest = pipeline.ingest(dataset_dir)
        state = pipeline.BootstrapState(out_dir, manifest, config)
        template, joint_schema = pipeline._load_template(dataset_dir)
        state.save()
        for _ in range(rounds):
            pipeline.run_round(state, template, joint_schema)
            click.echo(f"round {state.round_index}: "
                       f"{len(state.pending(state.round_index))} records pending; "
                       f"serving review UI on 127.0.0.1:{port} (Ctrl-C when done)")
            service.serve(state, port=port)
            pipeline.finalize_round(state, template, joint_schema)
            if state.diagnostic is not None:
                break
    if state.diagnostic:
        raise click.ClickException(state.diagnostic)
    click.echo(f"survivors per round: {state.survivor_counts}")


@main.command()
@click.option("--dims", default=3, show_default=True, type=int)
@click.option("--size", default=100, show_default=True, type=int)
@click.option("--seed", default=7, show_default=True, type=int)
@click.option("--pose-jitter", default=0.0, show_default=True, type=float)
@click.option("--noise-sigma", default=0.0, show_default=True, type=float)
@click.option("--template-vertices", default=900, show_default=True, type=int)
@click.option("--points-factor", default=3, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
def synth(dims, size, seed, pose_jitter, noise_sigma, template_vertices,
          points_factor, out_dir):
    """Generate a synthetic scan corpus with known ground truth."""
    from .synth import synth_corpus

    out = synth_corpus(out_dir, dims=dims, size=size, seed=seed,
                       pose_jitter=pose_jitter, noise_sigma=noise_sigma,
                       template_vertices=template_vertices,
                       points_factor=points_factor)
    click.echo(f"wrote corpus of {size} scans -> {out}")


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--port", default=8321, show_default=True, type=int)
def review(run_dir, port):
    """Serve the review interface for an existing bootstrap run."""
    from . import service

    state = pipeline.BootstrapState.load(run_dir)
    service.serve(state, port=port)


if __name__ == "__main__":
    main()
