import numpy as np
import pytest

from bodyfit.geom import Scan
from bodyfit.synth import SynthGenerator


@pytest.fixture(scope="session")
def gen():
    """Shared synthetic generator: 3 latent dims on the 900-vertex template."""
    return SynthGenerator(dims=3, template_vertices=900, seed=7)


@pytest.fixture(scope="session")
def template(gen):
    return gen.template


@pytest.fixture(scope="session")
def corpus30(gen):
    rng = np.random.default_rng(0)
    return [gen.body(rng.normal(size=3)) for _ in range(30)]


@pytest.fixture(scope="session")
def space30(gen, corpus30):
    from bodyfit import sscape

    return sscape.learn(corpus30, 3, gen.template, gen.joint_schema)


def scan_of_body(gen, vertices, rng, noise_sigma=0.0, factor=3):
    """Scan sampled from a posed/shaped body, landmarks carried exactly."""
    from bodyfit.synth import sample_surface

    pts, nrm = sample_surface(vertices, gen.template.faces,
                              factor * gen.template.n_vertices, rng,
                              noise_sigma=noise_sigma)
    return Scan(points=pts, normals=nrm, landmarks=gen.landmarks_of(vertices), id="t")
