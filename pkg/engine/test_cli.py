"""
Command-line surface: parsing, exit codes and the solve/verify/compare flow
"""
import json

import pandas as pd
import pytest

from main import EXIT_INPUT, EXIT_OK, EXIT_RUNTIME, build_parser, main
from models.schemas import DispatchResult, RunMode, VerifyReport


@pytest.fixture
def case_file(tmp_path, small_case_data):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(small_case_data))
    return path


def test_parser_defaults():
    args = build_parser().parse_args(["solve", "--case", "c.json"])
    assert args.mode == "centralized"
    assert args.out == "results.json"
    assert args.transport == "inprocess"
    assert not args.admm_accumulate
    assert args.scenarios is None


def test_presets_default_to_thirty_percent_of_net_load():
    args = build_parser().parse_args(["simulate-freq", "--case", "c.json", "--result", "r.json", "--case-id", "1"])
    assert args.preset_fraction == pytest.approx(0.3)
    assert not args.preset_bounds
    bounds = build_parser().parse_args(["compare", "a.json", "--preset-bounds"])
    assert bounds.preset_bounds


def test_parser_rejects_unknown_modes():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["solve", "--case", "c.json", "--mode", "magic"])


def test_missing_case_is_an_input_error(tmp_path, capsys):
    out = tmp_path / "results.json"
    code = main(["solve", "--case", str(tmp_path / "absent.json"), "--out", str(out)])
    assert code == EXIT_INPUT
    assert not out.exists()
    assert "❌" in capsys.readouterr().err


def test_invalid_case_lists_diagnostics(tmp_path, small_case_data, capsys):
    small_case_data["links"][0]["tps_bus"] = 9
    path = tmp_path / "broken.json"
    path.write_text(json.dumps(small_case_data))
    assert main(["sample", "--case", str(path), "--out", str(tmp_path / "s.csv")]) == EXIT_INPUT
    assert "dangling-reference" in capsys.readouterr().err


def test_sample_writes_scenarios(tmp_path, case_file):
    out = tmp_path / "scenarios.csv"
    assert main(["sample", "--case", str(case_file), "--scenarios", "12", "--seed", "3", "--out", str(out)]) == EXIT_OK
    frame = pd.read_csv(out)
    assert len(frame) == 12
    assert "tps.d2@0" in frame.columns


def test_fit_margin_prints_planes(case_file, capsys):
    assert main(["fit-margin", "--case", str(case_file), "--segments", "2", "--grid", "4"]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "plane 1" in printed
    assert "H box" in printed


def test_solve_verify_compare(tmp_path, case_file, capsys):
    result_path = tmp_path / "cfc.json"
    ifc_path = tmp_path / "ifc.json"
    common = ["--case", str(case_file), "--scenarios", "20", "--seed", "5"]
    assert main(["solve", *common, "--out", str(result_path)]) == EXIT_OK
    assert main(["solve", *common, "--mode", "ifc", "--out", str(ifc_path)]) == EXIT_OK

    result = DispatchResult.model_validate_json(result_path.read_text())
    assert result.mode == RunMode.CENTRALIZED
    assert result.manifest.seed == 5
    assert result.manifest.scenarios == 20
    assert result.case_hash

    report_path = tmp_path / "verify.json"
    assert main(["verify", "--case", str(case_file), "--result", str(result_path), "--mc", "50",
                 "--out", str(report_path)]) == EXIT_OK
    report = VerifyReport.model_validate_json(report_path.read_text())
    assert report.scenarios == 50
    assert report.case_hash == result.case_hash

    capsys.readouterr()
    assert main(["compare", str(result_path), str(ifc_path)]) == EXIT_OK
    table = capsys.readouterr().out
    assert "centralized" in table and "ifc" in table


def test_result_of_another_case_is_refused(tmp_path, case_file, small_case_data):
    result_path = tmp_path / "cfc.json"
    assert main(["solve", "--case", str(case_file), "--scenarios", "10", "--out", str(result_path)]) == EXIT_OK
    small_case_data["tps"]["network"]["buses"][1]["p_demand"] = 22.0
    other = tmp_path / "other.json"
    other.write_text(json.dumps(small_case_data))
    assert main(["verify", "--case", str(other), "--result", str(result_path), "--mc", "5"]) == EXIT_INPUT


def test_debug_dump_writes_sensitivities(tmp_path, case_file):
    dump = tmp_path / "dump"
    out = tmp_path / "cfc.json"
    assert main(["solve", "--case", str(case_file), "--scenarios", "10", "--out", str(out),
                 "--debug-dump", str(dump)]) == EXIT_OK
    assert (dump / "tps-a_p.csv").exists()
    assert (dump / "adn1-f_q.csv").exists()


def test_unconverged_run_is_kept_away_from_verify(tmp_path, case_file):
    out = tmp_path / "dist.json"
    stalled = tmp_path / "dist.unconverged.json"
    code = main(["solve", "--case", str(case_file), "--scenarios", "8", "--mode", "distributed",
                 "--admm-max-iters", "1", "--admm-epsilon", "1e-12", "--outer-max", "1",
                 "--no-reference", "--out", str(out), "--history", str(tmp_path / "h.csv")])
    assert code == EXIT_RUNTIME
    assert not out.exists()
    result = DispatchResult.model_validate_json(stalled.read_text())
    assert not result.converged

    verify = ["verify", "--case", str(case_file), "--result", str(stalled), "--mc", "5"]
    assert main(verify) == EXIT_INPUT
    assert main([*verify, "--allow-unconverged"]) == EXIT_OK


def test_boundary_response_and_allocation_shares(tmp_path, case_file, capsys):
    result_path = tmp_path / "cfc.json"
    assert main(["solve", "--case", str(case_file), "--scenarios", "10", "--out", str(result_path)]) == EXIT_OK
    boundary = tmp_path / "boundary.csv"
    assert main(["simulate-freq", "--case", str(case_file), "--result", str(result_path),
                 "--case-id", "1", "--boundary", str(boundary)]) == EXIT_OK
    table = pd.read_csv(boundary)
    assert sorted(table["case_id"]) == [1, 2, 3, 4]
    assert list(table["actual_p"]) == pytest.approx(list(table["base_p"] - table["regulation"]))

    csv = tmp_path / "compare.csv"
    assert main(["compare", str(result_path), "--case", str(case_file), "--case-id", "1", "--csv", str(csv)]) == EXIT_OK
    frame = pd.read_csv(csv)
    for column in ("adn_share_h", "adn_share_d", "adn_share_r_up", "adn_share_r_dn"):
        assert 0.0 <= frame.loc[0, column] <= 1.0


def test_sweep_reports_every_cell(tmp_path, case_file, capsys):
    out = tmp_path / "sweep.csv"
    code = main(["sweep", "--case", str(case_file), "--counts", "6,8", "--seed", "3",
                 "--admm-max-iters", "2", "--admm-epsilon", "1e-12", "--outer-max", "1", "--csv", str(out)])
    frame = pd.read_csv(out)
    assert list(frame["scenarios"]) == [6, 8]
    assert set(frame["case"]) == {"small"}
    assert (frame["buses"] == 4).all()
    assert (frame[["build_seconds", "centralized_seconds", "distributed_seconds"]] >= 0).all().all()
    assert code == (EXIT_OK if frame["converged"].all() else EXIT_RUNTIME)
