import json

import numpy as np

import pytest

from textdiffusion.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny trained run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli_run")
    config = {
        "time_steps": 40, "max_target_len": 8, "max_source_len": 12,
        "task": "copy", "synth_size": 48, "synth_alphabet": 8,
        "synth_min_len": 2, "synth_max_len": 6,
        "embed_dim": 6, "hidden_dim": 12, "ffn_dim": 24, "heads": 2,
        "encoder_layers": 1, "decoder_layers": 1,
        "batch_size": 8, "max_steps": 400, "learning_rate": 1e-3,
        "warmup_steps": 20, "schedule_update_interval": 60, "schedule_stride": 5,
        "checkpoint_interval": 150, "log_interval": 50,
        "out_dir": str(root / "run"),
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config))
    assert main(["train", "--config", str(config_path), "--steps", "150"]) == EXIT_OK
    return root, config_path


class TestTrain:
    def test_artifacts_written(self, trained):
        root, _ = trained
        assert (root / "run" / "last.ckpt").exists()
        log = (root / "run" / "log.jsonl").read_text().splitlines()
        records = [json.loads(line) for line in log]
        assert any(r.get("event") == "schedule_update" for r in records)
        assert any("total" in r for r in records)

    def test_usage_error_exit_code(self):
        assert main(["train"]) == EXIT_USAGE

    def test_unknown_config_key_is_data_error(self, trained, tmp_path):
        root, config_path = trained
        payload = json.loads(config_path.read_text())
        payload["tim_steps"] = 3
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(payload))
        assert main(["train", "--config", str(bad)]) == EXIT_DATA

    def test_missing_config_file_is_data_error(self):
        assert main(["train", "--config", "/nonexistent/c.json"]) == EXIT_DATA

    def test_resume_from_checkpoint(self, trained, capsys):
        root, config_path = trained
        ckpt = root / "run" / "last.ckpt"
        code = main([
            "train", "--config", str(config_path),
            "--resume", str(ckpt), "--steps", "10",
        ])
        assert code == EXIT_OK
        assert "step 160" in capsys.readouterr().out


class TestGenerate:
    def test_single_candidate_matches_mbr_of_one(self, trained, tmp_path):
        root, _ = trained
        ckpt = root / "run" / "last.ckpt"
        src = tmp_path / "in.txt"
        src.write_text("a b c\nb a\n")
        out1 = tmp_path / "out1.txt"
        out2 = tmp_path / "out2.txt"
        assert main(["generate", "--ckpt", str(ckpt), "--in", str(src),
                     "--out", str(out1), "--seed", "4"]) == EXIT_OK
        assert main(["generate", "--ckpt", str(ckpt), "--in", str(src),
                     "--out", str(out2), "--mbr", "1", "--seed", "4"]) == EXIT_OK
        assert out1.read_text() == out2.read_text()

    def test_deterministic_across_reruns(self, trained, tmp_path):
        root, _ = trained
        ckpt = root / "run" / "last.ckpt"
        src = tmp_path / "in.txt"
        src.write_text("c a b\n")
        outs = []
        for name in ("r1.txt", "r2.txt"):
            out = tmp_path / name
            assert main(["generate", "--ckpt", str(ckpt), "--in", str(src),
                         "--out", str(out), "--mbr", "3", "--seed", "9"]) == EXIT_OK
            outs.append(out.read_text())
        assert outs[0] == outs[1]

    def test_trace_and_candidates_sidecar(self, trained, tmp_path):
        root, _ = trained
        ckpt = root / "run" / "last.ckpt"
        src = tmp_path / "in.txt"
        src.write_text("a b\n")
        out = tmp_path / "out.txt"
        trace = tmp_path / "trace.jsonl"
        sidecar = tmp_path / "cands.jsonl"
        assert main(["generate", "--ckpt", str(ckpt), "--in", str(src),
                     "--out", str(out), "--trace", str(trace),
                     "--candidates-out", str(sidecar), "--mbr", "2"]) == EXIT_OK
        trace_records = [json.loads(l) for l in trace.read_text().splitlines()]
        assert len(trace_records) == 40  # one per reverse step
        assert {"t", "decoded_argmax_text"} == set(trace_records[0])
        cands = json.loads(sidecar.read_text().splitlines()[0])
        assert len(cands) == 2

    def test_missing_checkpoint_is_data_error(self, tmp_path):
        src = tmp_path / "in.txt"
        src.write_text("a\n")
        assert main(["generate", "--ckpt", "/nonexistent.ckpt",
                     "--in", str(src), "--out", str(tmp_path / "o.txt")]) == EXIT_DATA


class TestEval:
    def test_identical_files_score_one(self, tmp_path, capsys):
        hyp = tmp_path / "hyp.txt"
        ref = tmp_path / "ref.txt"
        hyp.write_text("a b c d\nx y z w\n")
        ref.write_text("a b c d\nx y z w\n")
        assert main(["eval", "--hyp", str(hyp), "--ref", str(ref)]) == EXIT_OK
        payload = json.loads(capsys.readouterr().out)
        assert payload["bleu"] == pytest.approx(1.0)
        assert payload["exact_match"] == 1.0

    def test_shuffled_refs_drop_exact_match(self, tmp_path, capsys):
        hyp = tmp_path / "hyp.txt"
        ref = tmp_path / "ref.txt"
        hyp.write_text("a b c d\nx y z w\n")
        ref.write_text("x y z w\na b c d\n")
        main(["eval", "--hyp", str(hyp), "--ref", str(ref)])
        payload = json.loads(capsys.readouterr().out)
        assert payload["exact_match"] == 0.0

    def test_line_count_mismatch_is_data_error(self, tmp_path):
        hyp = tmp_path / "hyp.txt"
        ref = tmp_path / "ref.txt"
        hyp.write_text("a\n")
        ref.write_text("a\nb\n")
        assert main(["eval", "--hyp", str(hyp), "--ref", str(ref)]) == EXIT_DATA

    def test_report_shape_fixture(self, tmp_path):
        hyp = tmp_path / "hyp.txt"
        ref = tmp_path / "ref.txt"
        hyp.write_text("a b c d\n")
        ref.write_text("a b c d\n")
        out = tmp_path / "report.json"
        assert main(["eval", "--hyp", str(hyp), "--ref", str(ref),
                     "--out", str(out)]) == EXIT_OK
        payload = json.loads(out.read_text())
        assert set(payload) == {
            "bleu", "dist1", "div4", "exact_match", "count", "config_digest"
        }


class TestPlotSchedule:
    def test_csv_rows_and_fresh_curves_identical(self, trained, tmp_path):
        root, _ = trained
        ckpt = root / "run" / "last.ckpt"
        out_dir = tmp_path / "plots"
        assert main(["plot-schedule", "--ckpt", str(ckpt), "--out", str(out_dir),
                     "--positions", "0,2,5", "--svg"]) == EXIT_OK
        rows = (out_dir / "schedule.csv").read_text().splitlines()
        assert len(rows) == 1 + 41 * 3  # header + (T+1) * positions
        svg = (out_dir / "schedule.svg").read_text()
        assert svg.startswith("<svg") and "polyline" in svg

    def test_adapted_position_curves_diverge(self, trained):
        """After training on a length-varying corpus, at least two
        positions carry different schedule columns (nothing forces them
        equal once per-position losses differ)."""
        from textdiffusion.training import load_model

        root, _ = trained
        _model, sched, _vocab, _cfg, _ledger = load_model(root / "run" / "last.ckpt")
        columns = sched.alpha_bar.T
        assert any(
            not np.allclose(columns[0], columns[i]) for i in range(1, sched.n)
        )
