import hashlib
import subprocess
import sys
from pathlib import Path

import pytest

from aeroloc.cli import main
from aeroloc.formats import read_config, read_trajectory


def tree_digest(root: Path) -> dict:
    root = Path(root)
    if root.is_file():
        return {root.name: hashlib.sha256(root.read_bytes()).hexdigest()}
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(base: Path, *sim_args):
    """simulate -> match -> track / pseudolabel / prune -> eval under ``base``."""
    sc, mt = base / "scenario", base / "matches"
    assert run("simulate", "--out", sc, "--frames", 20, *sim_args) == 0
    assert run("match", "--scenario", sc, "--out", mt) == 0
    assert run("track", "--scenario", sc, "--matches", mt, "--out", base / "track.traj") == 0
    assert run("pseudolabel", "--scenario", sc, "--matches", mt, "--out", base / "pseudo.traj",
               "--graph", base / "graph.txt") == 0
    assert run("prune", "--scenario", sc, "--matches", mt, "--out", base / "kept.txt", "--fraction", 0.1) == 0
    assert run("eval", "--gt", sc / "gt.traj", "--pred", mt / "argmax.traj", "--out", base / "report.txt") == 0
    return sc, mt


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    a = tmp_path_factory.mktemp("run_a")
    b = tmp_path_factory.mktemp("run_b")
    pipeline(a, "--seed", 7)
    pipeline(b, "--seed", 7)
    return a, b


@pytest.mark.parametrize("artifact", [
    "scenario", "matches", "track.traj", "pseudo.traj", "graph.txt", "kept.txt", "report.txt", "report.png",
])
def test_byte_identical(two_runs, artifact):
    a, b = two_runs
    assert (a / artifact).exists()
    assert tree_digest(a / artifact) == tree_digest(b / artifact)


def test_parallel_match_identical(two_runs, tmp_path):
    a, _ = two_runs
    assert run("match", "--scenario", a / "scenario", "--out", tmp_path / "m", "--jobs", 3) == 0
    assert tree_digest(tmp_path / "m") == tree_digest(a / "matches")


def test_match_artifacts(two_runs):
    mt = two_runs[0] / "matches"
    assert {p.suffix for p in (mt / "dist").iterdir()} == {".fmap", ".txt", ".pgm"}
    assert len(list((mt / "dist").glob("*.fmap"))) == 20
    assert read_config(mt / "match.cfg")["rotations"] == "11"


def test_noise_free_recall(tmp_path, capsys):
    sc, mt = tmp_path / "s", tmp_path / "m"
    assert run("simulate", "--out", sc, "--frames", 15, "--sigma-n", 0, "--seed", 3) == 0
    assert run("match", "--scenario", sc, "--out", mt) == 0
    capsys.readouterr()
    assert run("eval", "--gt", sc / "gt.traj", "--pred", mt / "argmax.traj", "--out", tmp_path / "r.txt") == 0
    out = capsys.readouterr().out
    assert "metric recall_lateral_1m 100" in out and "metric recall_longitudinal_1m 100" in out
    assert (tmp_path / "r.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("# scenario overrides\nframes = 6\nseed = 2\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path / "a") == 0
    assert len(read_trajectory(tmp_path / "a" / "gt.traj")[0]) == 6
    assert run("simulate", "--config", cfg, "--out", tmp_path / "b", "--frames", 4) == 0
    assert len(read_trajectory(tmp_path / "b" / "gt.traj")[0]) == 4


def test_prune_reports_dropped(two_runs, capsys, tmp_path):
    a = two_runs[0]
    capsys.readouterr()
    assert run("prune", "--scenario", a / "scenario", "--matches", a / "matches",
               "--out", tmp_path / "k.txt", "--fraction", 0.1) == 0
    out = capsys.readouterr().out
    assert "metric dropped 2" in out and out.count("\ndropped ") == 2
    assert len((tmp_path / "k.txt").read_text().splitlines()) == 18


class TestErrors:
    def test_missing_scenario_names_path(self, tmp_path, capsys):
        missing = tmp_path / "nowhere"
        assert run("match", "--scenario", missing, "--out", tmp_path / "m") != 0
        err = capsys.readouterr().err
        assert err.startswith("aeroloc match: error:") and str(missing) in err

    def test_corrupt_trajectory_names_path(self, two_runs, tmp_path, capsys):
        bad = tmp_path / "bad.traj"
        bad.write_text("0 0.0 1.0 2.0\n")
        assert run("eval", "--gt", two_runs[0] / "scenario" / "gt.traj", "--pred", bad,
                   "--out", tmp_path / "r.txt") != 0
        assert str(bad) in capsys.readouterr().err

    def test_missing_distribution_names_path(self, two_runs, tmp_path, capsys):
        assert run("track", "--scenario", two_runs[0] / "scenario", "--matches", tmp_path,
                   "--out", tmp_path / "t.traj") != 0
        assert str(tmp_path) in capsys.readouterr().err

    def test_missing_required_option(self, capsys):
        assert run("eval", "--gt", "x") != 0
        assert "--pred" in capsys.readouterr().err

    def test_bad_value(self, tmp_path, capsys):
        assert run("simulate", "--out", tmp_path / "x", "--frames", "many") != 0
        assert "--frames" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "aeroloc.cli", "simulate", "--out", str(tmp_path / "s"),
                           "--frames", "3"], capture_output=True, text=True)
    assert proc.returncode == 0 and "metric frames 3" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "aeroloc.cli", "track", "--scenario", str(tmp_path / "zz"),
                           "--matches", "m", "--out", "o"], capture_output=True, text=True)
    assert proc.returncode == 1 and "zz" in proc.stderr


def test_transformer_source_deterministic(tmp_path):
    for name in ("a", "b"):
        base = tmp_path / name
        assert run("simulate", "--out", base / "s", "--frames", 3, "--bev-source", "transformer") == 0
        assert run("match", "--scenario", base / "s", "--out", base / "m") == 0
    assert (tmp_path / "a" / "s" / "rig.txt").exists()
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
