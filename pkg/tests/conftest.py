import numpy as np
import pytest

from core_types import Calibration, PinholeCamera, RegisteredFrame
from dataset_io import write_dataset, write_pose_csv
from sim_harness import (
    Albedo,
    Box,
    Plane,
    SceneSpec,
    SimulationSpec,
    TrajectorySpec,
    camera_pose,
    default_calibration,
    make_trajectory,
    render_frame,
    scene_preset,
    simulate,
)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-scenario tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def camera():
    return PinholeCamera(fx=120.0, fy=120.0, cx=80.0, cy=60.0, width=160, height=120)


@pytest.fixture
def calib(camera):
    return Calibration(camera=camera)


@pytest.fixture
def small_calib():
    """Simulator calibration (IMU behind the camera) at a small resolution."""
    return default_calibration(160, 120, fx=110.0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_frame(gray, depth, camera, t=0.0):
    return RegisteredFrame(float(t), np.asarray(gray, dtype=np.uint8), np.asarray(depth, dtype=np.float32), camera)


@pytest.fixture
def furniture_scene():
    """Back wall at x = 3 with two yawed boxes in front, lit."""
    wall = Plane((3.0, 0.0, 1.0), (-1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (3.0, 1.5), Albedo("noise", 0.15, 0.5, 0.45, 3))
    boxes = (
        Box((1.8, -0.35, 1.0), (0.4, 0.4, 0.5), 0.6, Albedo("checker", 0.1, 0.5, 0.4)),
        Box((2.0, 0.45, 0.9), (0.35, 0.45, 0.4), -0.5, Albedo("checker", 0.1, 0.5, 0.4)),
    )
    return SceneSpec(planes=(wall,), boxes=boxes, ambient=1.0, dark_noise=3.0, depth_noise_coeffs=(0.0, 0.0, 0.0))


@pytest.fixture
def furniture_frame(furniture_scene, small_calib):
    """One rendered frame from 1 m height looking along +x at the furniture."""
    kin = make_trajectory(TrajectorySpec(kind="static", start=(0.0, 0.0, 1.0))).kinematics(0.0)
    return render_frame(furniture_scene, camera_pose(kin, small_calib), small_calib.camera)


def tiny_spec(seed=0, **trajectory):
    """A short, low-resolution circle in the lit room."""
    traj = dict(kind="circle", duration=2.0, imu_rate=200.0, frame_rate=10.0, hold=0.6, radius=0.3,
                angular_speed=0.2, start=(0.0, 0.0, 1.2))
    traj.update(trajectory)
    return SimulationSpec(scene=scene_preset("room"), trajectory=TrajectorySpec(**traj),
                          width=96, height=72, fx=66.0, seed=seed)


@pytest.fixture(scope="session")
def tiny_sim():
    return simulate(tiny_spec())


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_sim):
    root = tmp_path_factory.mktemp("tiny") / "dataset"
    metadata = {"source": "simulator", "initial_position": [float(x) for x in tiny_sim.ground_truth.position[0]]}
    write_dataset(tiny_sim.events(), root, tiny_sim.calibration, metadata)
    write_pose_csv(root / "ground_truth.csv", tiny_sim.ground_truth)
    return root
