import json

import pytest

from poul.cli import build_parser, main

DS = ["--n-train", "90", "--n-test", "10"]


def test_protocol_commands_round_trip(tmp_path, capsys):
    rd = ["--results-dir", str(tmp_path)]
    assert main(["setup", *rd, *DS, "--epochs", "1", "--batch", "30", "--slices", "3", "--buckets", "256"]) == 0
    assert main(["challenge", *rd, *DS, "--index", "2"]) == 0
    assert main(["delete", *rd, *DS, "--index", "4", "9"]) == 0
    assert main(["audit", *rd, *DS, "--predictions", "2"]) == 0
    assert main(["audit", *rd, *DS, "--predictions", "1", "--inject-stale"]) == 1
    assert main(["verify-transcript", *rd]) == 0
    out = capsys.readouterr().out
    assert "REJECT" not in out and "stale-model" in out
    assert (tmp_path / "audit_log.jsonl").exists()


def test_tampered_transcript_fails(tmp_path):
    rd = ["--results-dir", str(tmp_path)]
    main(["setup", *rd, *DS, "--epochs", "1", "--batch", "30", "--slices", "2", "--buckets", "256"])
    path = tmp_path / "state" / "transcript.jsonl"
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    for r in recs:
        if r["type"] == "predict":
            r["label"] = 1 - r["label"]
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))
    assert main(["verify-transcript", *rd]) == 1


def test_benchmark_commands_write_results(tmp_path):
    rd = ["--results-dir", str(tmp_path)]
    assert main(["bench-filter", *rd, "--items", "500", "--buckets", "256", "--reps", "1", "--negatives", "500"]) == 0
    assert main(["bench-mht", *rd, "--items", "500", "--buckets", "256", "--reps", "1", "--ops", "50"]) == 0
    assert main(["bench-storage", *rd, "--entries", "60", "--buckets", "64"]) == 0
    assert main(["sweep-hparams", *rd, *DS, "--epoch-list", "1", "2", "--batch-sizes", "30"]) == 0
    assert main(["sweep-slices", *rd, *DS, "--epochs", "2", "--batch", "30", "--slice-counts", "1", "2"]) == 0
    assert main(["gen-dataset", *rd, *DS]) == 0
    assert main(["bench-unlearn", *rd, "--dataset", str(tmp_path / "dataset"), "--slices", "2", "--epochs", "1",
                 "--batch", "30", "--reps", "1", "--buckets", "128"]) == 0
    for name in ("bench-filter", "bench-mht", "filter-vs-mht", "bench-storage", "sweep-hparams", "sweep-slices",
                 "bench-unlearn"):
        assert (tmp_path / f"{name}.csv").exists() and (tmp_path / f"{name}.json").exists()


def test_missing_session_and_bad_flags(tmp_path):
    with pytest.raises(SystemExit):
        main(["challenge", "--results-dir", str(tmp_path)])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["delete"])
