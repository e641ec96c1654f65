import numpy as np
import pytest

from maptrack import renderer, synthetic
from maptrack.camera import CameraModel
from maptrack.geodata import GeoTransform, sample_elevation


@pytest.fixture(scope="session")
def cam():
    return CameraModel.default()


@pytest.fixture(scope="session")
def scene():
    """Textured hilly layer (320 m square) with its mesh."""
    layer = synthetic.synthetic_layer("base", (640, 640), pixel_size=0.5, seed=3)
    mesh = renderer.build_mesh(layer.ortho, layer.elevation)
    (e0, e1), (n0, n1) = layer.ortho.extent()
    center = (0.5 * (e0 + e1), 0.5 * (n0 + n1))
    ground = sample_elevation(layer.elevation, *center)
    return dict(layer=layer, mesh=mesh, center=center, ground=ground)


@pytest.fixture(scope="session")
def flat_mesh():
    """Flat elevation-0 plane, 4 km square at 4 m/px, random texture."""
    rng = np.random.default_rng(0)
    tex = rng.integers(0, 256, size=(1001, 1001, 3), dtype=np.uint8)
    layer = synthetic.flat_layer("flat", (1001, 1001), pixel_size=4.0, origin=(-2000.0, 2000.0), texture=tex)
    return renderer.build_mesh(layer.ortho, layer.elevation)


def random_pose(rng, angle_max=np.pi - 1e-3, t_scale=10.0):
    from maptrack import se3

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, angle_max)
    return se3.PoseSE3(se3.so3_exp(axis * angle), rng.normal(size=3) * t_scale)


def unit_geo(size=1.0, origin=(0.0, 0.0)):
    return GeoTransform(origin[0], origin[1], size, size)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, title, ok, detail, seconds=None):
        timing = "" if seconds is None else f" [{seconds:.1f} s]"
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}: {title}: {detail}{timing}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
