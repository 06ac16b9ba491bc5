import numpy as np
import pytest
from hypothesis import settings

from stratsift.core import IrisImage, Keypoint, KeypointSet
from stratsift.harness import synthetic_texture

settings.register_profile("stratsift", deadline=None, max_examples=60)
settings.load_profile("stratsift")


def textured(radius=64, seed=0):
    return IrisImage(synthetic_texture(radius, np.random.default_rng(seed)), radius, f"tex{seed}")


def random_descriptors(rng, n):
    d = rng.random((n, 128))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def cloud(rng, n, radius=64.0, descriptors=None):
    """Keypoints scattered over the annulus with random unit descriptors."""
    rho = rng.uniform(0.35 * radius, 0.95 * radius, n)
    theta = rng.uniform(0, 2 * np.pi, n)
    desc = random_descriptors(rng, n) if descriptors is None else descriptors
    kps = [Keypoint(radius + r * np.cos(t), radius + r * np.sin(t), 2.0, 0.0, d)
           for r, t, d in zip(rho, theta, desc)]
    return KeypointSet(tuple(kps), "cloud", radius)


def transform_cloud(kps, alpha_deg, scale=1.0):
    """Rotate/scale a cloud about its center; the probe radius scales too."""
    r = kps.radius_r
    rn = r * scale
    a = np.radians(alpha_deg)
    out = []
    for k in kps.keypoints:
        u, v = k.x - r, k.y - r
        out.append(Keypoint(rn + scale * (np.cos(a) * u - np.sin(a) * v),
                            rn + scale * (np.sin(a) * u + np.cos(a) * v),
                            k.sigma * scale, k.orientation, k.descriptor))
    return KeypointSet(tuple(out), "probe", rn)


@pytest.fixture(scope="session")
def tex_image():
    return textured(64, 0)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one line per criterion; lines are echoed after the run."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
