import shutil

import numpy as np
import pytest
import yaml

from core_types import RegisteredFrame
from dataset_io import (
    IMU_HEADER,
    MANIFEST,
    POSE_COLUMNS,
    TRACK_COLUMNS,
    Dataset,
    load_dataset,
    open_dataset,
    read_gray,
    read_imu_csv,
    read_manifest,
    read_pose_csv,
    read_table,
    write_dataset,
    write_depth_mm,
    write_gray,
    write_imu_csv,
    write_table,
    write_tracks_csv,
)
from ekf_backend import ImuSample
from errors import DataError, LoadError
from tracking_frontend import TrackRecord


@pytest.fixture
def dataset_copy(tiny_dataset, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(tiny_dataset, root)
    return root


def _edit_manifest(root, edit):
    path = root / MANIFEST
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    edit(data)
    path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")


class Test_images:
    def test_gray_round_trip(self, tmp_path):
        gray = np.random.default_rng(0).integers(0, 256, (12, 17)).astype(np.uint8)
        write_gray(tmp_path / "a.pgm", gray)
        np.testing.assert_array_equal(read_gray(tmp_path / "a.pgm"), gray)
        assert (tmp_path / "a.pgm").read_bytes()[:2] == b"P5"

    def test_depth_is_sixteen_bit(self, tmp_path):
        from dataset_io import read_depth_mm

        depth = np.array([[0, 750, 6000, 65535]], dtype=np.uint16)
        write_depth_mm(tmp_path / "d.png", depth)
        np.testing.assert_array_equal(read_depth_mm(tmp_path / "d.png"), depth)

    def test_unreadable_image(self, tmp_path):
        (tmp_path / "bad.pgm").write_text("not an image")
        with pytest.raises(LoadError):
            read_gray(tmp_path / "bad.pgm")


class Test_imu_csv:
    def test_round_trip_is_exact(self, tmp_path):
        samples = [ImuSample(0.1 * i + 1e-9, np.array([0.1, -0.2, 9.81]) / 3.0, np.array([1e-5, 0.0, 0.3]))
                   for i in range(5)]
        write_imu_csv(tmp_path / "imu.csv", samples)
        assert (tmp_path / "imu.csv").read_text().splitlines()[0] == IMU_HEADER
        back = read_imu_csv(tmp_path / "imu.csv")
        assert [s.timestamp for s in back] == [s.timestamp for s in samples]
        np.testing.assert_array_equal(back[3].accel, samples[3].accel)

    def test_regression(self, tmp_path):
        (tmp_path / "imu.csv").write_text(IMU_HEADER + "\n0.0,0,0,9.8,0,0,0\n0.2,0,0,9.8,0,0,0\n0.1,0,0,9.8,0,0,0\n")
        with pytest.raises(DataError, match="regression"):
            read_imu_csv(tmp_path / "imu.csv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "imu.csv").write_text("time,ax,ay,az,gx,gy,gz\n0.0,0,0,9.8,0,0,0\n")
        with pytest.raises(DataError):
            read_imu_csv(tmp_path / "imu.csv")

    def test_missing(self, tmp_path):
        with pytest.raises(LoadError):
            read_imu_csv(tmp_path / "nope.csv")


class Test_dataset:
    def test_round_trip(self, tiny_dataset, tiny_sim):
        ds = open_dataset(tiny_dataset)
        assert ds.n_frames == len(tiny_sim.frames)
        assert len(ds.imu) == len(tiny_sim.imu)
        assert ds.calibration.camera == tiny_sim.calibration.camera
        np.testing.assert_allclose(ds.calibration.extrinsics.T_cam_imu.R,
                                   tiny_sim.calibration.extrinsics.T_cam_imu.R, atol=1e-12)
        assert ds.manifest.metadata["source"] == "simulator"
        frame = ds.frame(3)
        original = tiny_sim.frames[3]
        assert frame.timestamp == original.timestamp
        np.testing.assert_array_equal(frame.gray, original.gray)
        np.testing.assert_array_equal(frame.depth, original.depth)
        np.testing.assert_array_equal(ds.imu[7].gyro, tiny_sim.imu[7].gyro)

    @pytest.mark.parametrize("prefetch", [True, False])
    def test_events_in_order(self, tiny_dataset, tiny_sim, prefetch):
        events = list(load_dataset(tiny_dataset, prefetch=prefetch))
        assert len(events) == len(tiny_sim.imu) + len(tiny_sim.frames)
        times = [e.timestamp for e in events]
        assert times == sorted(times)
        frames = [e for e in events if isinstance(e, RegisteredFrame)]
        assert [f.timestamp for f in frames] == [f.timestamp for f in tiny_sim.frames]
        assert isinstance(events[0], ImuSample)

    def test_stop_early_with_prefetch(self, tiny_dataset):
        events = Dataset(tiny_dataset).events(prefetch=True)
        for _ in range(30):
            next(events)
        events.close()

    def test_frame_out_of_range(self, tiny_dataset):
        with pytest.raises(DataError):
            open_dataset(tiny_dataset).frame(10_000)

    def test_unregistered_depth(self, dataset_copy, tiny_sim):
        _edit_manifest(dataset_copy, lambda d: d.update(depth_registered=False))
        ds = open_dataset(dataset_copy)
        assert not ds.manifest.depth_registered
        # identity depth-to-color extrinsics reproject every pixel onto itself
        np.testing.assert_allclose(ds.frame(0).depth, tiny_sim.frames[0].depth, atol=1e-6)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(LoadError):
            read_manifest(tmp_path)

    def test_missing_image_names_frame(self, dataset_copy):
        (dataset_copy / "gray" / "000002.pgm").unlink()
        with pytest.raises(LoadError, match="frame 2 at t="):
            read_manifest(dataset_copy)

    def test_frame_regression(self, dataset_copy):
        def swap(d):
            d["frames"][4]["t"] = d["frames"][2]["t"]

        _edit_manifest(dataset_copy, swap)
        with pytest.raises(DataError, match="regression at frame 4"):
            read_manifest(dataset_copy)

    def test_missing_calibration(self, dataset_copy):
        (dataset_copy / "calib.cfg").unlink()
        with pytest.raises(LoadError):
            open_dataset(dataset_copy)

    def test_write_rejects_regression(self, tmp_path, tiny_sim):
        events = [tiny_sim.frames[2], tiny_sim.frames[1]]
        with pytest.raises(DataError):
            write_dataset(events, tmp_path / "bad", tiny_sim.calibration)

    def test_write_rejects_unknown_event(self, tmp_path, tiny_sim):
        with pytest.raises(DataError):
            write_dataset(["frame"], tmp_path / "bad", tiny_sim.calibration)


class Test_tables:
    def test_table_round_trip(self, tmp_path):
        rows = np.array([[0.1, 1.0 / 3.0], [0.2, 2.0]])
        write_table(tmp_path / "t.csv", ["a", "b"], rows)
        header, data = read_table(tmp_path / "t.csv")
        assert header == ["a", "b"]
        np.testing.assert_array_equal(data, rows)

    def test_pose_csv(self, tiny_dataset, tiny_sim):
        gt = read_pose_csv(tiny_dataset / "ground_truth.csv")
        np.testing.assert_array_equal(gt.position, tiny_sim.ground_truth.position)
        header, _ = read_table(tiny_dataset / "ground_truth.csv")
        assert header == POSE_COLUMNS

    def test_pose_csv_missing_column(self, tmp_path):
        write_table(tmp_path / "p.csv", ["t", "px", "py"], [[0.0, 1.0, 2.0]])
        with pytest.raises(DataError, match="pz"):
            read_pose_csv(tmp_path / "p.csv")

    def test_tracks_csv(self, tmp_path):
        records = [
            TrackRecord(3, 7, (10.5, 20.0), (11.0, 20.5), 12, (8.0, 8.0)),
            TrackRecord(3, 8, None, None, None, None),
        ]
        write_tracks_csv(tmp_path / "tracks.csv", records)
        lines = (tmp_path / "tracks.csv").read_text().splitlines()
        assert lines[0] == ",".join(TRACK_COLUMNS)
        assert lines[1] == "3,7,10.5,20.0,11.0,20.5,12,8.0,8.0"
        assert lines[2] == "3,8,,,,,,,"
