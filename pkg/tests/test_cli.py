import json

import numpy as np
import pytest

from swingsafe.casefile import bundled_case
from swingsafe.cli import EXIT_AUDIT, EXIT_CONFIG, EXIT_MISMATCH, EXIT_OK, constant_injection_start, main


@pytest.fixture
def out(tmp_path):
    return tmp_path / "out"


def _run(*argv):
    return main([str(a) for a in argv])


def test_run_bundled_bilayered_passes_all_audits(out, capsys):
    assert _run("run", "--audit", "all", "--out-dir", out) == EXIT_OK
    text = capsys.readouterr().out
    for word in ("safety: PASS", "lyapunov: PASS", "locality: PASS", "invariants: PASS"):
        assert word in text
    report = json.loads((out / "case4_bilayered_audit.json").read_text())
    assert report["audits"] == {"locality": True, "lyapunov": True, "safety": True}
    assert report["details"]["invariants"]["passed"]
    header = (out / "case4_bilayered.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "t" and "omega_hz_4" in header and "Vbar" in header and "safe_1" in header


def test_run_open_loop_fails_safety(out, capsys):
    assert _run("run", "--mode", "open-loop", "--out-dir", out) == EXIT_AUDIT
    text = capsys.readouterr().out
    assert "safety: FAIL" in text


def test_run_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert _run("run", "--t-end", 12, "--out-dir", d) == EXIT_OK
    assert (a / "case4_bilayered.csv").read_bytes() == (b / "case4_bilayered.csv").read_bytes()


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SWINGSAFE_OUT_DIR", str(tmp_path / "env"))
    assert _run("run", "--mode", "open-loop", "--t-end", 2) == EXIT_OK
    assert (tmp_path / "env" / "case4_open-loop.csv").exists()


def test_shift_requires_shift_mode(out, capsys):
    assert _run("run", "--mode", "bilayered", "--shift", 0.1, "--out-dir", out) == EXIT_CONFIG
    assert "shift" in capsys.readouterr().err


def test_compare_identical_runs(out, capsys):
    assert _run("compare", "--t-end", 5, "--mode", "bilayered", "--mode-b", "bilayered", "--out-dir", out) == EXIT_OK
    data = json.loads(next(out.glob("compare_*.json")).read_text())
    assert data["a"] == data["b"]


def test_compare_mismatched_cases(out, tmp_path, capsys):
    text = bundled_case("case4").read_text().replace("damping = 0.15", "damping = 0.16", 1)
    assert "damping = 0.16" in text
    other = tmp_path / "other.toml"
    other.write_text(text)
    code = _run("compare", "--mode", "bilayered", "--mode-b", "top-only", "--case-b", other, "--out-dir", out)
    assert code == EXIT_MISMATCH
    assert "cases differ" in capsys.readouterr().err


def test_solve_qp_backends_agree(tmp_path, capsys):
    dump = tmp_path / "qp.npz"
    assert _run("dump-qp", "--horizon", 2, dump) == EXIT_OK
    capsys.readouterr()
    ys = {}
    for backend in ("reference", "saddle-distributed"):
        assert _run("solve-qp", dump, "--backend", backend) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        k = next(i for i, s in enumerate(lines) if s.startswith("Y* ("))
        ys[backend] = np.array([float(v) for v in lines[k + 1:]])
        if backend == "saddle-distributed":
            assert any(s.startswith("locality certificate:") for s in lines)
    ref, dist = ys["reference"], ys["saddle-distributed"]
    assert np.linalg.norm(dist - ref) / max(1.0, np.linalg.norm(ref)) <= 1e-4


def test_solve_qp_corrupted_dump(tmp_path, capsys):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not an archive")
    assert _run("solve-qp", bad) == EXIT_CONFIG
    assert _run("solve-qp", tmp_path / "missing.npz") == EXIT_CONFIG


def test_check_case(capsys):
    assert _run("check-case") == EXIT_OK
    text = capsys.readouterr().out
    assert "equilibrium condition: holds" in text and "spectral radius 1.0000" in text


def test_check_case_rejects_topology_file(capsys):
    assert _run("check-case", "--case", bundled_case("case39_topology")) == EXIT_CONFIG


def test_constant_injection_start():
    from types import SimpleNamespace

    net = SimpleNamespace(injection=np.array([1.0]))
    traj = SimpleNamespace(net=net, p=np.array([[1.0], [1.2], [1.1], [1.0], [1.0]]))
    assert constant_injection_start(traj) == 3
    traj.p = np.ones((4, 1))
    assert constant_injection_start(traj) == 0
