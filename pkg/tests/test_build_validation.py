"""
Build and distribution checks for the longevity-risk package.

These tests need the ``uv`` tool and are skipped without it.
"""

import os
import shutil
import subprocess
import tempfile
import zipfile
from pathlib import Path

import pytest

ROOT = Path(__file__).parent.parent

pytestmark = pytest.mark.skipif(shutil.which("uv") is None, reason="uv is not installed")


@pytest.fixture(scope="module")
def wheel(tmp_path_factory):
    """Wheel and sdist built by ``uv build`` into a scratch directory."""
    dist = tmp_path_factory.mktemp("dist")
    result = subprocess.run(
        ["uv", "build", "--out-dir", str(dist)], cwd=ROOT, capture_output=True, text=True
    )
    assert result.returncode == 0, f"uv build failed: {result.stderr}"
    wheels = list(dist.glob("*.whl"))
    assert len(wheels) == 1, f"Expected 1 wheel file, found {len(wheels)}"
    assert len(list(dist.glob("*.tar.gz"))) == 1
    return wheels[0]


class TestBuildValidation:
    """Test suite for validating the build and distribution process."""

    def test_wheel_name(self, wheel):
        """Test the wheel file naming convention."""
        assert "longevity_risk-0.1.0" in wheel.name
        assert wheel.name.endswith("-py3-none-any.whl")

    def test_package_contents(self, wheel):
        """Test that the wheel holds every module and the console script."""
        with zipfile.ZipFile(wheel) as archive:
            names = set(archive.namelist())
            for module in (
                "__init__", "main", "errors", "random_streams", "mortality_data",
                "leecarter", "projection", "annuity_engine", "risk_decomposition",
            ):
                assert f"longevity_risk/{module}.py" in names
            entry_points = next(n for n in names if n.endswith(".dist-info/entry_points.txt"))
            content = archive.read(entry_points).decode()
        assert "longevity-risk = longevity_risk.main:run_cli" in content

    def test_entry_point_functionality(self, wheel):
        """Test that the installed console script answers --help."""
        with tempfile.TemporaryDirectory() as temp_dir:
            venv_path = Path(temp_dir) / "venv"
            subprocess.run(["uv", "venv", str(venv_path)], check=True, capture_output=True)
            python_path = venv_path / "bin" / "python"
            result = subprocess.run(
                ["uv", "pip", "install", "--python", str(python_path), str(wheel)],
                capture_output=True,
                text=True,
            )
            assert result.returncode == 0, f"Package installation failed: {result.stderr}"

            script = venv_path / "bin" / "longevity-risk"
            assert script.is_file(), "Entry point script not created"
            assert os.access(script, os.X_OK), "Entry point is not executable"
            result = subprocess.run([str(script), "--help"], capture_output=True, text=True)
            assert result.returncode == 0
            for command in ("fit", "project", "simulate", "decompose", "scenarios"):
                assert command in result.stdout
