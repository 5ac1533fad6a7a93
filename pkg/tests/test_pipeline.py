import json

import numpy as np
import pytest

from config import FilterParams, PipelineConfig
from core_types import RegisteredFrame
from dataset_io import TRAJECTORY_COLUMNS, read_pose_csv, read_table
from descriptor import Validity
from ekf_backend import ImuSample
from errors import NumericalFault
from pipeline import FRAME_COLUMNS, Odometry, ReorderBuffer, fault_dump, run_odometry, write_run_outputs
from tests.conftest import make_frame


def _imu(t):
    return ImuSample(t, np.array([0.0, 0.0, 9.81]), np.zeros(3))


@pytest.fixture(scope="module")
def tiny_run(tiny_sim):
    position = tiny_sim.ground_truth.position[0]
    return run_odometry(tiny_sim.events(), tiny_sim.calibration, PipelineConfig(), position=position)


class Test_ReorderBuffer:
    def test_holds_then_releases_in_order(self):
        buf = ReorderBuffer(hold_s=0.1)
        assert buf.push(_imu(0.00)) == []
        assert buf.push(_imu(0.05)) == []
        assert buf.push(_imu(0.03)) == []
        released = buf.push(_imu(0.12))
        assert [e.timestamp for e in released] == [0.0]
        assert [e.timestamp for e in buf.flush()] == [0.03, 0.05, 0.12]
        assert len(buf) == 0

    def test_imu_before_frame_on_tie(self, camera):
        buf = ReorderBuffer(hold_s=0.1)
        frame = make_frame(np.zeros(camera.shape), np.zeros(camera.shape), camera, t=1.0)
        assert buf.push(frame) == []
        assert buf.push(_imu(1.0)) == []
        out = buf.flush()
        assert len(out) == 2
        assert isinstance(out[0], ImuSample)
        assert isinstance(out[1], RegisteredFrame)
        assert buf.rejected == 0

    def test_late_imu_on_tie_with_released_frame_is_rejected(self, camera):
        buf = ReorderBuffer(hold_s=0.0)
        frame = make_frame(np.zeros(camera.shape), np.zeros(camera.shape), camera, t=1.0)
        released = buf.push(frame)
        assert len(released) == 1 and released[0] is frame
        assert buf.push(_imu(1.0)) == []
        assert buf.rejected == 1
        assert buf.flush() == []
        # a second frame at the same timestamp still sorts after the first
        again = make_frame(np.zeros(camera.shape), np.zeros(camera.shape), camera, t=1.0)
        released = buf.push(again)
        assert len(released) == 1 and released[0] is again
        assert buf.rejected == 1

    def test_rejects_events_older_than_released(self):
        buf = ReorderBuffer(hold_s=0.01)
        buf.push(_imu(0.0))
        buf.push(_imu(0.5))
        assert buf.last_released == 0.0
        assert buf.push(_imu(-0.1)) == []
        assert buf.rejected == 1


class Test_Odometry:
    def test_trajectory_rows(self, tiny_run, tiny_sim):
        traj = tiny_run.trajectory_array()
        assert traj.shape[1] == len(TRAJECTORY_COLUMNS)
        assert len(traj) >= len(tiny_sim.frames)
        assert np.all(np.diff(traj[:, 0]) >= 0)
        assert np.all(np.isfinite(traj))
        np.testing.assert_allclose(np.linalg.norm(traj[:, 4:8], axis=1), 1.0, atol=1e-9)
        assert np.all(traj[:, TRAJECTORY_COLUMNS.index("var_rx"):] >= 0)

    def test_report(self, tiny_run, tiny_sim):
        report = tiny_run.report
        assert report["frames"] == len(tiny_sim.frames)
        assert report["imu_samples"] == len(tiny_sim.imu)
        assert report["rejected_out_of_order"] == 0
        assert set(report["timing"]) == {"propagate", "detect", "track", "update", "manage"}
        assert report["landmarks"]["created"] > 0
        assert 0.0 <= report["match_rate"] <= 1.0
        last = max(tiny_sim.imu[-1].timestamp, tiny_sim.frames[-1].timestamp)
        assert report["final_state"]["t"] == pytest.approx(last)

    def test_final_position_near_truth(self, tiny_run, tiny_sim):
        final = np.array(tiny_run.report["final_state"]["position"])
        np.testing.assert_allclose(final, tiny_sim.ground_truth.position[-1], atol=0.3)

    def test_landmarks_bounded(self, tiny_run):
        assert all(f["landmarks"] <= PipelineConfig().tracking.j_max for f in tiny_run.frames)
        assert all(f["accepted"] <= f["matched"] for f in tiny_run.frames)

    def test_reordered_input_gives_same_result(self, tiny_run, tiny_sim):
        events = list(tiny_sim.events())
        for i in range(0, len(events) - 1, 7):
            events[i], events[i + 1] = events[i + 1], events[i]
        position = tiny_sim.ground_truth.position[0]
        shuffled = run_odometry(events, tiny_sim.calibration, PipelineConfig(), position=position)
        np.testing.assert_array_equal(shuffled.trajectory_array(), tiny_run.trajectory_array())

    def test_landmarks_start_from_describable_keypoints(self, tiny_sim):
        odo = Odometry(tiny_sim.calibration, position=tiny_sim.ground_truth.position[0])
        created = []
        add = odo.frontend.add

        def spy(lm_id, descriptor, modality, frame_index):
            created.append(descriptor)
            add(lm_id, descriptor, modality, frame_index)

        odo.frontend.add = spy
        for event in tiny_sim.events():
            odo.feed(event)
        odo.finish()
        assert created
        assert all(d is not None and d.validity is not Validity.EMPTY for d in created)

    def test_imu_only(self, tiny_sim):
        result = run_odometry(tiny_sim.imu, tiny_sim.calibration)
        assert result.report["frames"] == 0
        assert len(result.trajectory) > 0
        assert result.landmarks == []

    def test_initializes_without_full_window(self, tiny_sim):
        config = PipelineConfig(filter=FilterParams(init_window_s=10.0))
        result = run_odometry(tiny_sim.imu[:20], tiny_sim.calibration, config)
        assert result.report["final_state"] is not None
        assert result.report["imu_samples"] == 20

    def test_depth_update_option(self, tiny_sim):
        config = PipelineConfig(filter=FilterParams(depth_update=True))
        events = [e for e in tiny_sim.events() if e.timestamp <= 1.0]
        result = run_odometry(events, tiny_sim.calibration, config, position=tiny_sim.ground_truth.position[0])
        assert np.all(np.isfinite(result.trajectory_array()))


class Test_outputs:
    def test_write_run_outputs(self, tiny_run, tmp_path):
        out = write_run_outputs(tiny_run, tmp_path / "run", tracks_path=tmp_path / "run" / "tracks.csv")
        header, traj = read_table(out / "trajectory.csv")
        assert header == TRAJECTORY_COLUMNS
        np.testing.assert_array_equal(traj, tiny_run.trajectory_array())
        assert len(read_pose_csv(out / "trajectory.csv").t) == len(traj)

        header, landmarks = read_table(out / "landmarks.csv")
        assert header == ["frame", "t", "landmark_id", "x", "y", "z"]
        assert len(landmarks) == len(tiny_run.landmarks)

        log = np.load(out / "run_log.npz")
        assert log["covariance"].shape == (len(traj), 15, 15)
        assert log["frame_stats"].shape == (len(tiny_run.frames), len(FRAME_COLUMNS))

        report = json.loads((out / "report.json").read_text())
        assert report["frames"] == tiny_run.report["frames"]
        assert (out / "tracks.csv").read_text().splitlines()[0].startswith("frame,landmark_id")

    def test_no_tracks_by_default(self, tiny_run, tmp_path):
        write_run_outputs(tiny_run, tmp_path)
        assert not (tmp_path / "tracks.csv").exists()


class Test_fault_dump:
    def test_includes_state(self, tiny_sim):
        odo = Odometry(tiny_sim.calibration)
        for e in tiny_sim.imu[:150]:
            odo.feed(e)
        odo.finish()
        dump = fault_dump(odo, NumericalFault("bad", {"imu": np.zeros(6)}))
        assert set(dump) >= {"imu", "state", "cov", "landmark_ids", "timestamp"}

    def test_without_filter(self):
        dump = fault_dump(None, NumericalFault("bad"))
        assert dump == {}
