import json
import os
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import streamlit as st

from dataset_io import read_gray, read_pose_csv, read_table
from errors import DveoError
from plots import (
    axis_error_figure,
    landmark_count_figure,
    landmark_figure,
    score_map_figure,
    trajectory_figure,
)
from sim_harness import evaluate_ate, evaluate_axis_errors, evaluate_rpe, final_drift

# ============================================================
# 1. PAGE CONFIG
# ============================================================
st.set_page_config(page_title="DVEO Run Viewer", page_icon="🛰️", layout="wide")

DEFAULT_RUN_DIR = os.environ.get("DVEO_RUN_DIR", "")
DEFAULT_GT = os.environ.get("DVEO_GROUND_TRUTH", "")


# ============================================================
# 2. AUTHENTICATION
# ============================================================
def check_login():
    """Password gate, only when APP_PASSWORD is set."""
    if "APP_PASSWORD" not in os.environ:
        return True

    if "authenticated" not in st.session_state:
        st.session_state["authenticated"] = False

    if st.session_state["authenticated"]:
        return True

    col1, col2, col3 = st.columns([1, 2, 1])
    with col2:
        st.title("🔐 DVEO Run Viewer")
        with st.form("login_form"):
            entered_password = st.text_input("Enter access password:", type="password")
            if st.form_submit_button("Login", type="primary"):
                if entered_password == os.environ.get("APP_PASSWORD", ""):
                    st.session_state["authenticated"] = True
                    st.rerun()
                else:
                    st.error("Incorrect password.")
    st.stop()
    return False


if not check_login():
    st.stop()


# ============================================================
# 3. LOADERS
# ============================================================
@st.cache_data(show_spinner=False)
def load_report(run_dir):
    path = Path(run_dir) / "report.json"
    if not path.is_file():
        return None
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


@st.cache_data(show_spinner=False)
def load_run_log(run_dir):
    path = Path(run_dir) / "run_log.npz"
    if not path.is_file():
        return None
    with np.load(path) as data:
        return {k: data[k] for k in data.files}


@st.cache_data(show_spinner=False)
def load_landmarks(run_dir):
    path = Path(run_dir) / "landmarks.csv"
    if not path.is_file():
        return np.zeros((0, 6))
    _, data = read_table(path)
    return data


def show_figure(fig):
    st.pyplot(fig)
    plt.close(fig)


# ============================================================
# 4. SIDEBAR
# ============================================================
st.title("🛰️ Depth-Visual-Inertial Odometry: Run Viewer")

with st.sidebar:
    run_dir = st.text_input("Run output directory:", value=DEFAULT_RUN_DIR,
                            help="Directory written by `cli.py run --output`")
    gt_path = st.text_input("Ground-truth CSV (optional):", value=DEFAULT_GT)
    detect_dir = st.text_input("Detector dump directory (optional):", value="",
                               help="Directory written by `cli.py detect --output`")
    align = st.toggle("Align estimate to ground truth", value=True)
    rpe_delta = st.slider("RPE spacing [s]:", 0.1, 5.0, 1.0, 0.1)

if not run_dir:
    st.info("Enter a run output directory in the sidebar.")
    st.stop()

# ============================================================
# 5. RUN SUMMARY
# ============================================================
try:
    estimate = read_pose_csv(Path(run_dir) / "trajectory.csv")
except DveoError as e:
    st.error(f"Cannot load trajectory: {e}")
    st.stop()

report = load_report(run_dir)
run_log = load_run_log(run_dir)

if report:
    col1, col2, col3, col4 = st.columns(4)
    col1.metric("Frames", report.get("frames", 0))
    col2.metric("IMU samples", report.get("imu_samples", 0))
    col3.metric("Match rate", f"{100 * report.get('match_rate', 0.0):.1f} %")
    col4.metric("Mean landmarks", f"{report.get('landmarks', {}).get('mean_alive', 0.0):.1f}")
    with st.expander("📋 Run report"):
        st.json(report)
    timing = report.get("timing", {})
    if timing:
        st.caption("Per-frame stage time [ms]: " + ", ".join(
            f"{stage} {v.get('per_frame_ms', 0.0):.1f}" for stage, v in timing.items()))
else:
    st.warning("⚠️ report.json not found; showing the trajectory only.")

# ============================================================
# 6. TRAJECTORY AND ERRORS
# ============================================================
ground_truth = None
if gt_path:
    try:
        ground_truth = read_pose_csv(gt_path)
    except DveoError as e:
        st.error(f"Cannot load ground truth: {e}")

left, right = st.columns(2)
with left:
    st.subheader("Trajectory (top view)")
    aligned = None
    if ground_truth is not None:
        try:
            ate = evaluate_ate(estimate, ground_truth, align=align)
            aligned = estimate.position @ ate.rotation.T + ate.translation
        except DveoError as e:
            st.error(f"ATE failed: {e}")
            ate = None
    show_figure(trajectory_figure(estimate, ground_truth, aligned))

with right:
    st.subheader("Landmark map")
    landmarks = load_landmarks(run_dir)
    if len(landmarks):
        last = landmarks[:, 0] == landmarks[-1, 0]
        show_all = st.toggle("All frames", value=False)
        points = landmarks[:, 3:6] if show_all else landmarks[last, 3:6]
        show_figure(landmark_figure(points, estimate))
    else:
        st.caption("No landmarks were recorded.")

if ground_truth is not None and aligned is not None:
    st.subheader("Accuracy")
    col1, col2, col3 = st.columns(3)
    col1.metric("ATE RMSE", f"{ate.rmse:.3f} m")
    col2.metric("Final drift", f"{final_drift(estimate, ground_truth):.3f} m")
    try:
        rpe = evaluate_rpe(estimate, ground_truth, delta=rpe_delta)
        col3.metric(f"RPE ({rpe_delta:.1f} s)", f"{rpe.trans_rmse:.3f} m")
    except DveoError as e:
        col3.caption(f"RPE unavailable: {e}")

    times, errors, axis_rmse = evaluate_axis_errors(estimate, ground_truth, align=align)
    sigmas = None
    if run_log is not None and not align:
        cols = list(run_log["columns"])
        traj = run_log["trajectory"]
        var = traj[:, [cols.index(c) for c in ("var_rx", "var_ry", "var_rz")]]
        sigmas = (traj[:, cols.index("t")], np.sqrt(var))
    show_figure(axis_error_figure(times, errors, sigmas))
    st.caption("Per-axis RMSE: " + ", ".join(f"{a} {v:.3f} m" for a, v in zip("xyz", axis_rmse)))

if run_log is not None and len(run_log.get("frame_stats", [])):
    st.subheader("Landmarks per frame")
    stats = run_log["frame_stats"]
    fcols = list(run_log["frame_columns"])
    show_figure(landmark_count_figure(stats[:, [fcols.index("t"), fcols.index("landmarks"), fcols.index("matched")]]))

# ============================================================
# 7. DETECTOR DUMP
# ============================================================
if detect_dir:
    st.subheader("Score maps")
    names = ("visual", "depth", "combined")
    paths = [Path(detect_dir) / f"score_{n}.pgm" for n in names]
    if all(p.is_file() for p in paths):
        try:
            show_figure(score_map_figure([read_gray(p) for p in paths], [f"{n} score" for n in names]))
        except DveoError as e:
            st.error(f"Cannot read score maps: {e}")
    else:
        st.warning("⚠️ score_visual.pgm / score_depth.pgm / score_combined.pgm not found.")
