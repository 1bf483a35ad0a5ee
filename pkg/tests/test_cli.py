"""CLI subcommands: exit codes, file outputs, round-trips, config handling."""

import csv
import io
import json

from seqlab.cli import main
from seqlab.ioutil import csv_text, json_text


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


SMALL_GRID = [
    "--n-list", "8", "--b-list", "1", "--d-list", "8",
    "--heads-list", "4", "--p-list", "1,2,4",
]


class TestVerify:
    def test_small_grid_passes(self, tmp_path, capsys):
        rc = main(["verify", *SMALL_GRID, "--out", str(tmp_path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "PASS" in out
        report = json.loads(read(tmp_path / "verify_report.json"))
        assert report["all_passed"] is True
        assert report["cell_count"] == 21  # 3 kernels * 3 p + 2 * (2 kernels * 3 p)

    def test_empty_grid_trivially_passes(self, capsys):
        rc = main(["verify", "--schemes", ","])
        assert rc == 0

    def test_perturbation_fails_and_names_cell(self, tmp_path, capsys):
        rc = main([
            "verify", "--schemes", "ulysses", "--kernels", "dense",
            "--n-list", "8", "--b-list", "1", "--d-list", "8",
            "--heads-list", "4", "--p-list", "2",
            "--perturb", "1e-9", "--out", str(tmp_path),
        ])
        assert rc == 1
        report = json.loads(read(tmp_path / "verify_report.json"))
        assert report["failures"] == ["ulysses:dense:n8:b1:d8:h4:p2"]
        assert "ulysses:dense:n8:b1:d8:h4:p2" in capsys.readouterr().out

    def test_jobs_do_not_change_report(self, tmp_path):
        rc1 = main(["verify", *SMALL_GRID, "--out", str(tmp_path / "a")])
        rc2 = main(["verify", *SMALL_GRID, "--jobs", "4", "--out", str(tmp_path / "b")])
        assert rc1 == rc2 == 0
        assert read(tmp_path / "a/verify_report.json") == read(tmp_path / "b/verify_report.json")

    def test_determinism_across_runs_and_modes(self, tmp_path):
        paths = []
        for i, mode in enumerate(["lockstep", "lockstep", "concurrent", "concurrent"]):
            out = tmp_path / f"run{i}"
            rc = main(["verify", *SMALL_GRID, "--mode", mode, "--seed", "99",
                       "--out", str(out)])
            assert rc == 0
            paths.append(out / "verify_report.json")
        blobs = {read(p) for p in paths}
        assert len(blobs) == 1


class TestCost:
    def test_ratio_column_tracks_p(self, capsys):
        rc = main(["cost", "--n", "1024", "--h", "512", "--p", "2,4,8,16",
                   "--format", "csv"])
        assert rc == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        ratios = [r["ratio_vs_ulysses"] for r in rows if r["scheme"] == "megatron"]
        assert ratios == ["2", "4", "8", "16"]

    def test_p1_exact_all_zero(self, capsys):
        rc = main(["cost", "--n", "8", "--h", "8", "--p", "1",
                   "--convention", "exact", "--format", "csv"])
        assert rc == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert all(r["per_link_elements"] == "0" for r in rows)

    def test_cost_row_matches_trace_ledger(self, tmp_path, capsys):
        # exact-convention analytic row == summed simulator ledger records
        rc = main(["cost", "--n", "8", "--b", "1", "--h", "8", "--p", "4",
                   "--layers", "2", "--convention", "exact", "--format", "csv"])
        assert rc == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        analytic = {r["scheme"]: int(r["total_elements"]) for r in rows}
        for scheme in ("ulysses", "megatron", "ring"):
            out = tmp_path / scheme
            rc = main(["trace", "--scheme", scheme, "--n", "8", "--b", "1",
                       "--h", "8", "--heads", "4", "--p", "4", "--layers", "2",
                       "--out", str(out)])
            assert rc == 0
            records = list(csv.DictReader(io.StringIO(
                read(out / "ledger.csv").decode())))
            measured = sum(int(r["per_rank_egress_elements"]) for r in records)
            assert measured == analytic[scheme], scheme

    def test_bytes_flag(self, capsys):
        rc = main(["cost", "--n", "8", "--h", "8", "--p", "2", "--bytes",
                   "--element-bytes", "2"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "bytes/layer" in out


class TestTrace:
    def test_p1_empty_egress(self, tmp_path):
        rc = main(["trace", "--scheme", "ulysses", "--n", "8", "--h", "8",
                   "--heads", "4", "--p", "1", "--out", str(tmp_path)])
        assert rc == 0
        records = list(csv.DictReader(io.StringIO(read(tmp_path / "ledger.csv").decode())))
        assert all(int(r["per_rank_egress_elements"]) == 0 for r in records)

    def test_ulysses_two_layers_eight_a2a(self, tmp_path):
        rc = main(["trace", "--scheme", "ulysses", "--n", "8", "--h", "8",
                   "--heads", "4", "--p", "4", "--layers", "2", "--out", str(tmp_path)])
        assert rc == 0
        records = list(csv.DictReader(io.StringIO(read(tmp_path / "ledger.csv").decode())))
        assert len(records) == 8
        assert all(r["collective"] == "all_to_all" for r in records)

    def test_megatron_two_layers_4ag_4rs(self, tmp_path):
        rc = main(["trace", "--scheme", "megatron", "--n", "8", "--h", "8",
                   "--heads", "4", "--p", "4", "--layers", "2", "--out", str(tmp_path)])
        assert rc == 0
        records = list(csv.DictReader(io.StringIO(read(tmp_path / "ledger.csv").decode())))
        kinds = [r["collective"] for r in records]
        assert kinds.count("all_gather") == 4
        assert kinds.count("reduce_scatter") == 4

    def test_ring_blocked_is_usage_error(self, capsys):
        rc = main(["trace", "--scheme", "ring", "--kernel", "blocked"])
        assert rc == 2
        assert "ring" in capsys.readouterr().err

    def test_invalid_divisibility_is_usage_error(self, capsys):
        rc = main(["trace", "--scheme", "ulysses", "--n", "6", "--p", "4"])
        assert rc == 2


class TestMemory:
    def test_stage0_independent_of_p_seq(self, capsys):
        rc = main(["memory", "--psi", "1e9", "--stage", "0",
                   "--p-seq", "1,4,16", "--format", "csv"])
        assert rc == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert len({r["model_state_bytes"] for r in rows}) == 1

    def test_stage3_halves_when_p_seq_doubles(self, capsys):
        rc = main(["memory", "--psi", "1.2e9", "--p-data", "4", "--stage", "3",
                   "--p-seq", "8,16", "--format", "csv"])
        assert rc == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        vals = [float(r["model_state_bytes"]) for r in rows]
        assert vals[0] == 6.0e8 and vals[1] == 3.0e8

    def test_worked_example_crossover(self, capsys):
        rc = main(["memory", "--worked-example"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "fits: False" in out and "fits: True" in out

    def test_activation_columns(self, capsys):
        rc = main(["memory", "--psi", "1e9", "--stage", "3", "--p-seq", "2,4",
                   "--n", "4096", "--h", "512", "--layers", "4", "--format", "csv"])
        assert rc == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        acts = [float(r["activation_bytes"]) for r in rows]
        assert acts[0] == 2 * acts[1] > 0


class TestSweep:
    def test_ulysses_flat_megatron_grows(self, capsys):
        rc = main(["sweep", "--base-n", "8192", "--base-p", "8",
                   "--scales", "1,2,4,8", "--format", "csv"])
        assert rc == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        uly = [int(r["per_link_elements"]) for r in rows if r["scheme"] == "ulysses"]
        meg = [int(r["per_link_elements"]) for r in rows if r["scheme"] == "megatron"]
        assert len(set(uly)) == 1
        assert meg == [meg[0] * k for k in (1, 2, 4, 8)]

    def test_single_pair_degenerate(self, capsys):
        rc = main(["sweep", "--scales", "1", "--format", "csv"])
        assert rc == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert len(rows) == 3


class TestRoundTrips:
    def test_csv_and_json_round_trip_byte_identical(self, tmp_path):
        rc = main(["cost", "--n", "64", "--h", "8", "--p", "2,4",
                   "--convention", "exact", "--out", str(tmp_path)])
        assert rc == 0
        for name in ("cost.csv", "cost.json"):
            blob = read(tmp_path / name).decode()
            if name.endswith(".json"):
                assert json_text(json.loads(blob)) == blob
            else:
                rows = list(csv.reader(io.StringIO(blob)))
                assert csv_text(rows[0], rows[1:]) == blob

    def test_ledger_files_round_trip(self, tmp_path):
        rc = main(["trace", "--scheme", "ring", "--n", "8", "--h", "8",
                   "--heads", "4", "--p", "2", "--out", str(tmp_path)])
        assert rc == 0
        blob = read(tmp_path / "ledger.json").decode()
        assert json_text(json.loads(blob)) == blob
        cblob = read(tmp_path / "ledger.csv").decode()
        rows = list(csv.reader(io.StringIO(cblob)))
        assert csv_text(rows[0], rows[1:]) == cblob

    def test_every_machine_readable_output_round_trips(self, tmp_path):
        assert main(["verify", "--schemes", "ring", "--kernels", "dense",
                     "--n-list", "8", "--b-list", "1", "--d-list", "8",
                     "--heads-list", "2", "--p-list", "2",
                     "--out", str(tmp_path)]) == 0
        assert main(["sweep", "--scales", "1,2", "--out", str(tmp_path)]) == 0
        assert main(["memory", "--p-seq", "1,8", "--n", "1024", "--h", "64",
                     "--layers", "2", "--out", str(tmp_path)]) == 0
        for name in ("verify_report.json", "sweep.json", "memory.json"):
            blob = read(tmp_path / name).decode()
            assert json_text(json.loads(blob)) == blob
        for name in ("sweep.csv", "memory.csv"):
            blob = read(tmp_path / name).decode()
            rows = list(csv.reader(io.StringIO(blob)))
            assert csv_text(rows[0], rows[1:]) == blob


class TestConfig:
    def test_config_supplies_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("n = 2048\nh = 256\np = 4,8\nformat = csv\n")
        rc = main(["cost", "--config", str(cfg)])
        assert rc == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert {r["n"] for r in rows} == {"2048"}
        assert {r["p"] for r in rows} == {"4", "8"}

    def test_cli_flag_overrides_config(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("n = 2048\nformat = csv\n")
        rc = main(["cost", "--config", str(cfg), "--n", "512"])
        assert rc == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert {r["n"] for r in rows} == {"512"}

    def test_unknown_key_is_usage_error(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("frobnicate = 12\n")
        rc = main(["cost", "--config", str(cfg)])
        assert rc == 2
        assert "frobnicate" in capsys.readouterr().err

    def test_malformed_line_is_usage_error(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("just words\n")
        rc = main(["cost", "--config", str(cfg)])
        assert rc == 2

    def test_comments_and_blanks_ignored(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\n\nn = 128  # trailing\n")
        rc = main(["cost", "--config", str(cfg)])
        assert rc == 0


class TestPlots:
    def test_cost_plot_written(self, tmp_path):
        rc = main(["cost", "--p", "2,4,8", "--out", str(tmp_path), "--plot"])
        assert rc == 0
        assert (tmp_path / "cost.png").stat().st_size > 0

    def test_plot_without_out_is_usage_error(self, capsys):
        rc = main(["cost", "--plot"])
        assert rc == 2
        assert "--out" in capsys.readouterr().err

    def test_trace_sweep_memory_plots(self, tmp_path):
        assert main(["trace", "--n", "8", "--h", "8", "--heads", "4", "--p", "2",
                     "--out", str(tmp_path), "--plot"]) == 0
        assert main(["sweep", "--out", str(tmp_path), "--plot"]) == 0
        assert main(["memory", "--n", "4096", "--h", "512", "--layers", "2",
                     "--out", str(tmp_path), "--plot"]) == 0
        for name in ("trace.png", "sweep.png", "memory.png"):
            assert (tmp_path / name).stat().st_size > 0
