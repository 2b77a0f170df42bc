"""Tests for the batch front end: config schema, exit codes, VTK."""

from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from nsshape import cli
from nsshape.cli import build_mesh, main, parse_config, write_vtk
from nsshape.errors import ConfigError
from nsshape.mesh import generate_square_mesh, load_mesh

PRESETS = Path(cli.__file__).parent / "presets"


def write_cfg(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


TINY = """
[problem]
alpha = 0.5
dt = 0.1
t_final = 0.2
outer_bc = rotating_bc

[mesh]
source = ellipse
outer_radius = 0.8
semi_axis_a = 0.6
semi_axis_b = 0.4
edge_length = 0.13
"""


def test_preset_parses_to_documented_flow():
    rc = parse_config(PRESETS / "benchmark_alpha01.ini", "optimize")
    assert rc.problem.alpha == 0.1
    assert rc.problem.dt == 0.05
    assert rc.problem.t_final == 1.0
    v = rc.problem.outer_bc(np.array([[0.8, 0.0]]), 0.0)
    assert np.allclose(v, [[0.0, -0.12]])
    assert rc.cost == "tracking"
    assert rc.iterations == 30
    assert rc.target_radius == 0.2
    f = rc.problem.body_force(np.array([[0.5, 0.0]]), 0.0)
    assert np.all(np.isfinite(f)) and np.linalg.norm(f) > 0.0


def test_preset_sweep_alphas():
    assert parse_config(PRESETS / "benchmark_alpha001.ini",
                        "optimize").problem.alpha == 0.01
    rc = parse_config(PRESETS / "benchmark_alpha0001.ini", "optimize")
    assert rc.problem.alpha == 0.001
    # thin shear layers get the finer mesh
    assert rc.mesh_spec["edge_length"] == pytest.approx(0.0275)


def test_range_error_names_key(tmp_path):
    cfg = write_cfg(tmp_path, TINY.replace("alpha = 0.5", "alpha = -1"))
    with pytest.raises(ConfigError, match="alpha"):
        parse_config(cfg, "solve")


def test_unknown_key_and_section_rejected(tmp_path):
    cfg = write_cfg(tmp_path, TINY + "unknwn = 3\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(cfg, "solve")
    cfg = write_cfg(tmp_path, TINY + "\n[extras]\nfoo = 1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(cfg, "solve")
    # keys belonging to a different mesh source are unknown too
    cfg = write_cfg(tmp_path, TINY + "obstacle_radius = 0.2\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(cfg, "solve")


def test_missing_key_and_type_mismatch(tmp_path):
    cfg = write_cfg(tmp_path, TINY.replace("dt = 0.1\n", ""))
    with pytest.raises(ConfigError, match="dt"):
        parse_config(cfg, "solve")
    cfg = write_cfg(tmp_path, TINY + "\n[optimizer]\niterations = soon\n")
    with pytest.raises(ConfigError, match="iterations"):
        parse_config(cfg, "optimize")


def test_referenced_paths_must_exist(tmp_path):
    cfg = write_cfg(tmp_path, """
[problem]
alpha = 0.5
dt = 0.1
t_final = 0.2

[mesh]
source = file
path = missing.txt
""")
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(cfg, "solve")
    cfg2 = write_cfg(tmp_path, TINY + "\n[optimizer]\ndonor_path = gone.txt\n")
    with pytest.raises(ConfigError, match="donor_path"):
        parse_config(cfg2, "optimize")


def test_named_field_keys_validated(tmp_path):
    cfg = write_cfg(tmp_path,
                    TINY.replace("outer_bc = rotating_bc",
                                 "outer_bc = tornado"))
    with pytest.raises(ConfigError, match="outer_bc"):
        parse_config(cfg, "solve")


def test_solve_writes_parseable_snapshots(tmp_path):
    out = tmp_path / "out"
    cfg = write_cfg(tmp_path, TINY + f"\n[output]\ndirectory = {out}\n")
    assert main(["solve", "--config", str(cfg), "--snapshots", "1"]) == 0
    files = sorted(out.glob("state_*.vtk"))
    assert len(files) == 3  # levels 0, 1, 2
    lines = files[-1].read_text().splitlines()
    assert lines[0].startswith("# vtk DataFile")
    n = int(lines[4].split()[1])
    mesh = build_mesh(parse_config(cfg, "solve").mesh_spec)
    assert n == mesh.n_nodes


def test_vtk_writer_is_deterministic(tmp_path):
    mesh = generate_square_mesh(3)
    n_p2 = mesh.n_nodes + 16  # vertex + edge dof count for this mesh
    u = np.zeros(2 * n_p2)
    p = np.zeros(mesh.n_nodes)
    a, b = tmp_path / "a.vtk", tmp_path / "b.vtk"
    write_vtk(mesh, u, p, a)
    write_vtk(mesh, u, p, b)
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert "VECTORS velocity float" in text
    assert "SCALARS pressure float 1" in text
    assert text.count("\n0 0 0\n") > 0  # zero velocity rows
    with pytest.raises(ValueError):
        write_vtk(mesh, u[:-1], p, tmp_path / "c.vtk")


def test_zero_byte_mesh_is_config_error(tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    cfg = write_cfg(tmp_path, f"""
[problem]
alpha = 0.5
dt = 0.1
t_final = 0.2

[mesh]
source = file
path = {empty}
""")
    assert main(["solve", "--config", str(cfg)]) == 1


def test_optimize_writes_history_and_donor(tmp_path):
    out = tmp_path / "out"
    cfg = write_cfg(tmp_path, TINY + f"""
[optimizer]
cost = tracking
iterations = 1
target_radius = 0.2

[output]
directory = {out}
""")
    assert main(["optimize", "--config", str(cfg)]) == 0
    rows = (out / "history.csv").read_text().strip().splitlines()
    assert rows[0] == "iter,J,grad_norm,step,area,min_quality,seconds"
    assert len(rows) == 2
    donor = load_mesh(out / "donor_mesh.txt")
    r = np.linalg.norm(donor.nodes[donor.obstacle_nodes()], axis=1)
    assert np.abs(r - 0.2).max() <= 1e-12
    load_mesh(out / "mesh_0001.txt")  # reloads cleanly


def test_morph_exhaustion_exit_code(tmp_path):
    out = tmp_path / "out"
    cfg = write_cfg(tmp_path, TINY + f"""
[optimizer]
cost = vorticity
iterations = 2
step = 1e12
max_retries = 2

[output]
directory = {out}
""")
    assert main(["optimize", "--config", str(cfg)]) == 3


def test_out_flag_overrides_config(tmp_path):
    cfg = write_cfg(tmp_path, TINY)
    override = tmp_path / "elsewhere"
    assert main(["solve", "--config", str(cfg),
                 "--out", str(override)]) == 0
    assert (override / "state_0002.vtk").exists()


def test_verify_and_mms_gate_exit_codes(tmp_path, monkeypatch):
    level = SimpleNamespace(h=0.07, n_nodes=126, tracking_max=0.05,
                            vorticity_max=0.10)

    def fake_battery(passed):
        return SimpleNamespace(levels=[level], passed=lambda: passed)

    cfg = write_cfg(tmp_path, f"[output]\ndirectory = {tmp_path}/v\n")
    monkeypatch.setattr(cli, "run_battery",
                        lambda csv_path=None: fake_battery(True))
    assert main(["verify", "--config", str(cfg)]) == 0
    monkeypatch.setattr(cli, "run_battery",
                        lambda csv_path=None: fake_battery(False))
    assert main(["verify", "--config", str(cfg)]) == 4

    mms_level = SimpleNamespace(h=0.125, dt=0.05, velocity_error=1e-4,
                                pressure_error=1e-3)

    def fake_mms(v_order, p_order):
        return SimpleNamespace(levels=[mms_level], velocity_order=v_order,
                               pressure_order=p_order)

    monkeypatch.setattr(cli, "manufactured_convergence",
                        lambda: fake_mms(2.0, 2.0))
    assert main(["mms", "--config", str(cfg)]) == 0
    monkeypatch.setattr(cli, "manufactured_convergence",
                        lambda: fake_mms(1.2, 2.0))
    assert main(["mms", "--config", str(cfg)]) == 4


def test_bad_usage_exits_one():
    assert main([]) == 1
    assert main(["conquer", "--config", "x.ini"]) == 1
    assert main(["solve"]) == 1
