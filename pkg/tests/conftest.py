"""Shared test fixtures for sbsm-fit tests."""

import numpy as np
import pytest

from sbsm_fit.geometry import Mesh, icosphere, weld
from sbsm_fit.render import Camera
from sbsm_fit.synth import SynthSpec, make_bank, synth_quadruped


def make_cube(half: float = 1.0) -> Mesh:
    """Closed cube, each face split into four triangles around its center.

    Every corner touches exactly one equal-area triangle per adjacent face,
    so area-weighted corner normals point exactly along the diagonals.
    """
    eye = np.eye(3)
    vertices, faces = [], []
    for axis in range(3):
        for sign in (1.0, -1.0):
            u, v = eye[(axis + 1) % 3], eye[(axis + 2) % 3]
            if sign < 0:
                u, v = v, u
            center = sign * eye[axis]
            ring = [center - u - v, center + u - v, center + u + v, center - u + v]
            base = len(vertices)
            vertices += [center] + ring
            faces += [(base, base + 1 + k, base + 1 + (k + 1) % 4) for k in range(4)]
    return weld(Mesh(half * np.array(vertices), np.array(faces)))


@pytest.fixture
def cube():
    """Closed, outward-wound, mirror-symmetric cube with 14 vertices."""
    return make_cube()


@pytest.fixture
def sphere():
    """Unit icosphere with two subdivisions."""
    return icosphere(2)


@pytest.fixture
def small_cam():
    """Default camera at 32 x 32 pixels."""
    return Camera(width=32, height=32)


@pytest.fixture(scope="session")
def scene():
    """Low-resolution synthetic quadruped, shared across the session."""
    return synth_quadruped(SynthSpec(subdivisions=1, segments=6))


@pytest.fixture
def small_bank(scene):
    """Eight-token bank over the synthetic template with small dimensions."""
    return make_bank(scene.mesh, np.random.default_rng(0), size=8, key_dim=16, value_dim=8, top_m=4)
