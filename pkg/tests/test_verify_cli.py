import filecmp
import json

import pytest

from sbmexit.cli import main
from sbmexit.config import ConfigError, default_config, load_config, parse_config
from sbmexit.verify import calibrate_beta, check_combinatorics


BASE = {
    "schema": 1,
    "domain": {"type": "disk", "center": [0.0, 0.0], "radius": 1.0},
    "chain": {"depth": 3, "scale": 1.0},
    "seed": 777,
}


def write_cfg(tmp_path, name="cfg.json", **extra):
    data = {**BASE, **extra}
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def test_unknown_field_rejected_with_path():
    with pytest.raises(ConfigError) as err:
        parse_config({**BASE, "sim": {"dt_clouds": 1e-3}})
    assert "config.sim" in str(err.value) and "dt_clouds" in str(err.value)


def test_missing_required_field():
    bad = {k: v for k, v in BASE.items() if k != "seed"}
    with pytest.raises(ConfigError) as err:
        parse_config(bad)
    assert "config.seed" in str(err.value)


def test_bad_scenario_kind():
    with pytest.raises(ConfigError):
        parse_config({**BASE, "scenario": {"kind": "mystery"}})


def test_k_beyond_depth():
    with pytest.raises(ConfigError) as err:
        parse_config({**BASE, "k": 7})
    assert "config.k" in str(err.value)


def test_wrong_schema_version():
    with pytest.raises(ConfigError):
        parse_config({**BASE, "schema": 2})


def test_arc_family_needs_two_arcs():
    with pytest.raises(ConfigError):
        parse_config({**BASE, "scenario": {"kind": "arc-family",
                                           "arcs": [[0.0, 1.0]]}})


def test_config_hash_stable_and_sensitive():
    a = parse_config(dict(BASE))
    b = parse_config(dict(BASE))
    c = parse_config({**BASE, "seed": 778})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()


def test_load_config_round_trip(tmp_path):
    path = write_cfg(tmp_path)
    cfg = load_config(path)
    assert cfg.seed == 777 and cfg.depth == 3


def test_combinatorics_report_passes_and_serializes():
    rep = check_combinatorics(0)
    assert rep.passed()
    payload = rep.as_dict()
    assert payload["name"] == "combinatorics"
    json.dumps(payload)  # must be serializable


def test_cli_verify_combinatorics(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "out"
    rc = main(["verify", "combinatorics", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "verify_combinatorics.json").read_text())
    assert report["passed"] is True
    assert report["config_hash"]
    text = capsys.readouterr().out
    assert "[PASS] combinatorics" in text


def test_cli_solve_pde_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path)
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert main(["solve-pde", "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["solve-pde", "--config", str(cfg), "--out", str(out2)]) == 0
    files = sorted(p.name for p in out1.iterdir())
    assert "field_g.csv" in files and "field_g.png" in files
    for name in files:
        assert filecmp.cmp(out1 / name, out2 / name, shallow=False), name


def test_cli_seed_override_changes_artifacts(tmp_path):
    cfg = write_cfg(tmp_path, sim={"n": 8, "reps": 50, "chunk": 25})
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    assert main(["simulate-sbm", "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["simulate-sbm", "--config", str(cfg), "--out", str(out2),
                 "--seed", "12345"]) == 0
    a = json.loads((out1 / "simulate_sbm.json").read_text())
    b = json.loads((out2 / "simulate_sbm.json").read_text())
    assert a["seed"] != b["seed"]


def test_cli_simulate_and_backbone(tmp_path):
    cfg = write_cfg(tmp_path, sim={"n": 16}, k=2)
    out = tmp_path / "artifacts"
    assert main(["simulate-sbm", "--config", str(cfg), "--out", str(out)]) == 0
    atoms = (out / "exit_atoms.csv").read_text().splitlines()
    assert atoms[0] == "k,x,y,mass"
    assert main(["grow-backbone", "--config", str(cfg), "--out", str(out)]) == 0
    tree = json.loads((out / "backbone_tree.json").read_text())["tree"]
    assert tree["nodes"][0]["parent"] == -1


def test_cli_verify_small_backbone(tmp_path):
    cfg = write_cfg(
        tmp_path, k=2,
        sim={"tree_reps": 600, "tree_chunk": 300},
        thresholds={"n_se": 4.0},
    )
    out = tmp_path / "v"
    rc = main(["verify", "backbone-pair", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    rep = json.loads((out / "verify_backbone-pair.json").read_text())
    crits = {c["label"]: c for c in rep["reports"][0]["criteria"]}
    assert "deterministic vs tree MC" in crits
    assert (out / "backbone-pair.png").exists()


def test_cli_verify_tree_law_artifacts(tmp_path):
    cfg = write_cfg(
        tmp_path, k=1,
        sim={"tree_reps": 400, "tree_chunk": 200},
    )
    out = tmp_path / "law"
    main(["verify", "tree-law", "--config", str(cfg), "--out", str(out)])
    hist = (out / "gamma_hist.csv").read_text().splitlines()
    assert hist[0] == "lines,gamma_kill,gamma_clock,gamma_control"
    assert (out / "tree_law.png").exists()


def test_calibration_lands_near_four():
    cfg = default_config(sim={"reps": 1200, "chunk": 400, "dt_cloud": 2e-3})
    out = calibrate_beta(cfg, quick_reps=800, validate=False)
    assert 3.2 < out["beta"] < 4.8


def test_cli_calibrate_beta(tmp_path):
    cfg = write_cfg(
        tmp_path,
        sim={"reps": 500, "chunk": 250, "dt_cloud": 2e-3, "calibration_reps": 300},
        thresholds={"n_se": 4.0},
    )
    out = tmp_path / "cal"
    rc = main(["calibrate-beta", "--config", str(cfg), "--out", str(out)])
    payload = json.loads((out / "calibration.json").read_text())
    assert 3.0 <= payload["beta"] <= 5.0
    assert (out / "calibration.png").exists()
    assert rc == (0 if payload["passed"] else 1)


def test_worker_count_does_not_change_results():
    from sbmexit.verify import check_backbone_pair

    base = dict(k=2, sim={"tree_reps": 600, "tree_chunk": 150})
    cfg1 = default_config(**base, workers=1)
    cfg2 = default_config(**base, workers=2)
    r1 = check_backbone_pair(cfg1)
    r2 = check_backbone_pair(cfg2)
    assert r1.details["mc"] == r2.details["mc"]
    assert r1.details["se"] == r2.details["se"]


def test_output_dir_env_var(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path)
    target = tmp_path / "from_env"
    monkeypatch.setenv("SBMEXIT_OUT", str(target))
    assert main(["verify", "combinatorics", "--config", str(cfg)]) == 0
    assert (target / "verify_combinatorics.json").exists()


def test_family_jsonable():
    from fractions import Fraction

    from sbmexit.subsets import SubsetFamily, family_to_jsonable

    fam = SubsetFamily(2, {1: Fraction(1, 2), 2: Fraction(1, 3), 3: Fraction(1, 6)})
    out = family_to_jsonable(fam, float)
    assert out == {"1": 0.5, "2": pytest.approx(1 / 3), "1,2": pytest.approx(1 / 6)}
    json.dumps(out)
