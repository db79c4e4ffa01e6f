import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from toolkp.geometry import Pose, Rotation

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


@st.composite
def rotations(draw):
    q = np.array(draw(st.tuples(*[st.floats(-1.0, 1.0) for _ in range(4)])))
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    return Rotation(q)


@st.composite
def poses(draw):
    return Pose(draw(rotations()), draw(vec3))


def random_rotation(rng) -> Rotation:
    return Rotation(rng.normal(size=4))


def random_pose(rng, scale: float = 1.0) -> Pose:
    return Pose(random_rotation(rng), rng.normal(scale=scale, size=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def pour_run():
    """One full mock pipeline run on a pour fixture, shared across tests."""
    from toolkp.extraction import extract
    from toolkp.fixtures import make_fixture
    from toolkp.pipeline import PipelineConfig, TestScene, build_ports, plan

    fx = make_fixture("pour", 7)
    cfg = PipelineConfig.from_dict(fx.config)
    selector, *_ = build_ports(cfg, fx.bundle.task)
    ext = extract(fx.bundle, cfg.extraction, selector)
    scene = TestScene.from_dict(fx.scene)
    p = plan(ext, scene, cfg)
    return {"fixture": fx, "cfg": cfg, "extraction": ext, "scene": scene, "plan": p}


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
