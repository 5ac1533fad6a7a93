from pathlib import Path

import pytest

from cli import main

testing = pytest.importorskip("streamlit.testing.v1")

APP = str(Path(__file__).resolve().parents[1] / "app.py")


@pytest.fixture(scope="module")
def run_dir(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("viewer_run")
    assert main(["run", str(tiny_dataset), "--output", str(out)]) == 0
    return out


def test_asks_for_run_dir(monkeypatch):
    monkeypatch.delenv("APP_PASSWORD", raising=False)
    monkeypatch.delenv("DVEO_RUN_DIR", raising=False)
    at = testing.AppTest.from_file(APP, default_timeout=60).run()
    assert not at.exception
    assert any("run output directory" in info.value for info in at.info)


def test_password_gate(monkeypatch):
    monkeypatch.setenv("APP_PASSWORD", "secret")
    at = testing.AppTest.from_file(APP, default_timeout=60).run()
    assert not at.exception
    assert at.text_input[0].label == "Enter access password:"


def test_shows_run(run_dir, tiny_dataset, monkeypatch):
    monkeypatch.delenv("APP_PASSWORD", raising=False)
    monkeypatch.setenv("DVEO_RUN_DIR", str(run_dir))
    monkeypatch.setenv("DVEO_GROUND_TRUTH", str(tiny_dataset / "ground_truth.csv"))
    at = testing.AppTest.from_file(APP, default_timeout=120).run()
    assert not at.exception
    assert not at.error
    labels = [m.label for m in at.metric]
    assert "Frames" in labels
    assert "ATE RMSE" in labels


def test_missing_trajectory(tmp_path, monkeypatch):
    monkeypatch.delenv("APP_PASSWORD", raising=False)
    monkeypatch.setenv("DVEO_RUN_DIR", str(tmp_path))
    at = testing.AppTest.from_file(APP, default_timeout=60).run()
    assert any("Cannot load trajectory" in e.value for e in at.error)
