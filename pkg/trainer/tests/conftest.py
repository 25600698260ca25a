"""Shared fixtures; all tracker-side work goes through the vesseltrack CLI."""

import json
import subprocess

import pytest


def vesseltrack(*args):
    """Run the reference engine's CLI and return stdout.

    The trainer deliberately never imports vesseltrack: everything crosses
    the boundary as ADS/AWT/ACTL/AVOL files or CLI output.
    """
    command = ["vesseltrack"] + [str(a) for a in args]
    result = subprocess.run(command, capture_output=True, text=True)
    if result.returncode != 0:
        raise RuntimeError(
            f"{' '.join(command)} -> rc {result.returncode}\n{result.stderr}"
        )
    return result.stdout


def vesseltrack_rc(*args):
    """Like vesseltrack() but returns (returncode, stdout, stderr)."""
    command = ["vesseltrack"] + [str(a) for a in args]
    result = subprocess.run(command, capture_output=True, text=True)
    return result.returncode, result.stdout, result.stderr


def forward_json(*args):
    return json.loads(vesseltrack("forward", *args))


def read_actl_positions(path):
    """Points of an ACTL file as a list of (x, y, z); row order = point id."""
    lines = open(path, encoding="ascii").read().splitlines()
    out = []
    for line in lines[1:]:
        fields = line.split()
        out.append((float(fields[3]), float(fields[4]), float(fields[5])))
    return out


@pytest.fixture(scope="session")
def sample_workspace(tmp_path_factory):
    """Two tiny phantoms with direction and stop datasets on a 100-point grid."""
    root = tmp_path_factory.mktemp("ads")
    case_args = []
    for seed in (11, 12):
        vesseltrack(
            "phantom", "--out", root / f"t{seed}.actl",
            "--volume", root / f"t{seed}.avol",
            "--seed", seed, "--depth", 1, "--root-radius", 1.5,
            "--segment-lengths", "5,7",
        )
        case_args += ["--tree", root / f"t{seed}.actl",
                      "--volume", root / f"t{seed}.avol",
                      "--case-id", f"case{seed}"]
    vesseltrack(
        "dataset", *case_args,
        "--directions", root / "dir.ads", "--stops", root / "stop.ads",
        "--grid-size", 100, "--stops-per-endpoint", 2, "--seed", 5,
    )
    return root
