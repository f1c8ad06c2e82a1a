import csv
import json
import logging
import subprocess
import sys

import pytest

from interior_spikes.cli import EXIT_CONTRACTION, EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE, main
from interior_spikes.config import RunConfig, reference_page
from interior_spikes.store import SCHEMAS, Ledger

LINE = ["--domain", "interval:0,1", "--p", "3", "--epsilon", "0.04", "--h", "0.01"]


def test_ground_state_command(tmp_path, capsys):
    out = tmp_path / "gs.json"
    code = main(["-q", "ground-state", "--dim", "1", "--p", "3", "--out", str(out),
                 "--cache-dir", str(tmp_path / "cache")])
    assert code == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert abs(summary["I_w"] - 4 / 3) < 1e-6
    table = json.loads(out.read_text())
    assert table["dim"] == 1 and abs(table["I_w"] - 4 / 3) < 1e-6
    assert {"r_grid", "w", "dw", "A_n", "gamma", "lambda1", "phi0"} <= set(table)


def test_missing_exponent_is_usage_error():
    proc = subprocess.run([sys.executable, "-m", "interior_spikes", "ground-state", "--dim", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    assert "--p" in proc.stderr


def test_cache_hit_is_logged(tmp_path, caplog, capsys):
    args = ["ground-state", "--dim", "1", "--p", "3", "--cache-dir", str(tmp_path),
            "--out", str(tmp_path / "a.json")]
    assert main(args) == EXIT_OK
    with caplog.at_level(logging.INFO, logger="interior_spikes"):
        assert main(args) == EXIT_OK
    assert any("cache hit" in r.message for r in caplog.records)
    summary = json.loads(capsys.readouterr().out.split("\n}\n")[-2] + "\n}")
    assert summary["cache_hit"] is True


def test_short_radius_exit_code(tmp_path):
    code = main(["-q", "ground-state", "--dim", "1", "--p", "3", "--rmax", "10",
                 "--out", str(tmp_path / "gs.json")])
    assert code == EXIT_TOLERANCE


def test_small_rho_exit_code(tmp_path):
    code = main(["-q", "ladder", *LINE, "--rho", "4", "--out", str(tmp_path)])
    assert code == EXIT_CONTRACTION


def test_ladder_is_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["-q", "ladder", *LINE, "--k-max", "2", "--out", str(out), "--jobs", "2"])
        assert code == EXIT_OK
        outs.append((out / "ladder.csv").read_bytes())
    assert outs[0] == outs[1]
    rows = list(csv.reader(outs[0].decode().splitlines()))
    assert rows[0] == SCHEMAS["ladder"]
    assert [r[1] for r in rows[1:]] == ["1", "2"]


def test_fixed_point_commands(tmp_path, capsys):
    common = [*LINE, "--points", "0.3;0.7", "--out", str(tmp_path)]
    assert main(["-q", "reduce", *common]) == EXIT_OK
    assert main(["-q", "energy", *common]) == EXIT_OK
    for table in ("reduce", "energy"):
        header = (tmp_path / f"{table}.csv").read_text().splitlines()[0]
        assert header.split(",") == SCHEMAS[table]
    assert list(tmp_path.glob("reduce-*.json")) and list(tmp_path.glob("energy-*.json"))
    assert "M_eps=" in capsys.readouterr().out


def test_certify_command_passes_at_symmetric_pair(tmp_path, capsys):
    # by symmetry of the interval the pair 1/4, 3/4 is a critical point
    code = main(["-q", "certify", *LINE, "--points", "0.25;0.75", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert "count: PASS" in capsys.readouterr().out


def test_verify_asymptotics_command(tmp_path, capsys):
    code = main(["-q", "verify-asymptotics", "--domain", "interval:0,1", "--p", "3",
                 "--epsilon", "0.01", "--h", "0.01", "--out", str(tmp_path)])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 6 and all(line.endswith("PASS") for line in lines)


def test_points_required_for_reduce(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["-q", "reduce", *LINE, "--out", str(tmp_path)])
    assert exc.value.code == EXIT_USAGE


def test_config_file_and_flags(tmp_path):
    cfg = RunConfig(domain={"shape": "interval", "extents": [0, 1]}, p=3, epsilon=0.04, h=0.01,
                    k_max=1, output_dir=str(tmp_path / "runs"))
    path = tmp_path / "run.yaml"
    cfg.save(path)
    assert main(["-q", "ladder", "--config", str(path)]) == EXIT_OK
    rows = (tmp_path / "runs" / "ladder.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith(cfg.hash + ",1,")


def test_config_round_trip_and_hash(tmp_path):
    cfg = RunConfig(domain={"shape": "rectangle", "extents": [[0, 1], [0, 2]]}, p=3,
                    epsilon=0.05, h=0.25, points=[[0.5, 0.5], [0.5, 1.5]], k_target=2,
                    tolerances={"newton_tol": 1e-12})
    back = RunConfig.from_yaml(cfg.to_yaml())
    assert back == cfg and back.hash == cfg.hash
    assert cfg.replace(output_dir="elsewhere").hash == cfg.hash
    assert cfg.replace(rho=9.0).hash != cfg.hash
    assert cfg.replace(tolerances={"newton_tol": 1e-11}).hash == cfg.replace(tolerances={}).hash


@pytest.mark.parametrize("bad", [
    {"p": 0.5}, {"h": 0.5}, {"eta": 1.0}, {"order": 3}, {"k_target": -1},
    {"tolerances": {"nope": 1}}, {"points": [[0.5]]},
])
def test_config_validation(bad):
    base = dict(domain={"shape": "disk", "extents": [[0, 0], 1]}, p=3, epsilon=0.1, h=0.25)
    with pytest.raises(ValueError):
        RunConfig(**{**base, **bad})


def test_config_rejects_unknown_keys_and_wrong_dim():
    with pytest.raises(ValueError):
        RunConfig.from_dict({"domain": {"shape": "interval", "extents": [0, 1]}, "p": 3,
                             "epsilon": 0.1, "h": 0.25, "colour": "red"})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"domain": {"shape": "interval", "extents": [0, 1]}, "p": 3,
                             "epsilon": 0.1, "h": 0.25, "dim": 2})


def test_reference_page_lists_every_key(tmp_path, capsys):
    page = reference_page()
    for key in RunConfig.__dataclass_fields__:
        assert f"`{key}`" in page
    target = tmp_path / "ref.md"
    assert main(["config-reference", "--write", str(target)]) == EXIT_OK
    assert target.read_text() == page


def test_ledger_rejects_foreign_header(tmp_path):
    (tmp_path / "reduce.csv").write_text("config_hash,other\n")
    with pytest.raises(ValueError):
        Ledger(tmp_path, "abc").append("reduce", [])


def test_ledger_formats_cells(tmp_path):
    ledger = Ledger(tmp_path, "h")
    row = {c: 0 for c in SCHEMAS["certify"][1:]} | {"passed": True, "c_max": 0.1}
    ledger.append("certify", [row])
    lines = (tmp_path / "certify.csv").read_text().splitlines()
    assert lines[1].startswith("h,") and lines[1].endswith(",true")
    assert ",0.1," in lines[1]
