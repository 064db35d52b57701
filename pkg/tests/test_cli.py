import csv
import json

import pytest

from src.cli.main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from src.cli.reports import LATENCY_COLUMNS, read_report, write_report
from src.domain.metrics import EvalReport, LatencyReport, LatencyRow
from src.infrastructure.models import RunManifest, RunStatus

SMALL_DATA = ["--set", "data.synthetic.count=4", "--set", "data.synthetic.size_range=[32,32]"]


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv("VTK_SEED", raising=False)


def _rows(path):
    with path.open(newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def test_gen_data_writes_labelled_files(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), *SMALL_DATA]) == EXIT_OK

    files = sorted((tmp_path / "data").glob("*.ppm"))
    assert len(files) == 4
    assert all("_c" in f.stem for f in files)
    result = json.loads((tmp_path / "result.json").read_text())
    assert result["count"] == 4 and result["command"] == "gen-data"
    assert RunManifest.load(tmp_path).status == RunStatus.SUCCEEDED


def test_gen_data_is_deterministic(tmp_path):
    main(["gen-data", "--out", str(tmp_path / "a"), *SMALL_DATA])
    main(["gen-data", "--out", str(tmp_path / "b"), *SMALL_DATA])
    for a in sorted((tmp_path / "a" / "data").iterdir()):
        assert a.read_bytes() == (tmp_path / "b" / "data" / a.name).read_bytes()


@pytest.mark.parametrize("argv", [
    [],
    ["fly", "--out", "x"],
    ["gen-data"],
    ["train-flow", "--out", "x"],
    ["gen-data", "--out", "x", "--set", "novalue"],
    ["gen-data", "--out", "x", "--set", "train.learning_rate=0.1"],
    ["bench", "--out", "x", "--attention", "sparse"],
])
def test_usage_errors_exit_one(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE


def test_missing_config_file_exits_one(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--config", str(tmp_path / "none.toml")]) == EXIT_USAGE


def test_missing_checkpoint_is_a_runtime_failure(tmp_path):
    code = main(["eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "absent.vtkf"), *SMALL_DATA])
    assert code == EXIT_RUNTIME
    manifest = RunManifest.load(tmp_path)
    assert manifest.status == RunStatus.FAILED and manifest.last_error


def test_identity_model_evaluates_perfectly(tmp_path):
    identity = ["--set", "model.kind=identity", *SMALL_DATA, "--set", "eval.budget=16"]
    assert main(["train-ae", "--out", str(tmp_path / "ae"), *identity]) == EXIT_OK
    checkpoint = tmp_path / "ae" / "ae.vtkf"
    assert checkpoint.exists()

    assert main(["eval", "--out", str(tmp_path / "eval"), "--checkpoint", str(checkpoint), *identity]) == EXIT_OK
    report = read_report(tmp_path / "eval" / "report.json")
    assert report["psnr_db"] == 100.0
    assert report["ssim"] == pytest.approx(1.0, abs=1e-9)
    assert set(report["frechet"]) == {"fdd", "fid"}

    rows = _rows(tmp_path / "eval" / "report.csv")
    assert len(rows) == 1 and rows[0]["config_hash"] == report["config_hash"]


def test_bench_covers_every_cell(tmp_path):
    argv = ["bench", "--out", str(tmp_path), "--attention", "full,swa", "--resolutions", "32,48,64",
            "--set", "model.dec_depth=1", "--set", "eval.bench_repeats=1", "--set", "eval.bench_radius=1"]
    assert main(argv) == EXIT_OK

    report = read_report(tmp_path / "report.json")
    cells = [(r["resolution"], r["mode"]) for r in report["latency_ms"]]
    assert cells == [(32, "full"), (32, "swa"), (48, "full"), (48, "swa"), (64, "full"), (64, "swa")]
    assert set(report["exponents"]) == {"full", "swa"}
    assert len(_rows(tmp_path / "report.csv")) == 6


def test_seed_flag_changes_config_hash(tmp_path):
    main(["gen-data", "--out", str(tmp_path / "a"), *SMALL_DATA])
    main(["gen-data", "--out", str(tmp_path / "b"), "--seed", "5", *SMALL_DATA])
    hashes = {json.loads((tmp_path / d / "result.json").read_text())["config_hash"] for d in ("a", "b")}
    assert len(hashes) == 2


def _latency_report():
    rows = [LatencyRow(resolution=r, mode=m, median=1.0, p90=1.5, pairs=10, tokens=4)
            for r in (32, 64) for m in ("full", "swa")]
    return LatencyReport(latency_ms=rows, exponents={"full": 2.0}, config_hash="h" * 64)


def test_report_json_round_trip(tmp_path):
    report = _latency_report()
    write_report(report, tmp_path / "r.json", "json")
    assert LatencyReport.model_validate(read_report(tmp_path / "r.json")) == report


def test_report_csv_has_one_row_per_cell(tmp_path):
    report = _latency_report()
    path = write_report(report, tmp_path / "r.csv", "csv")
    lines = path.read_text().splitlines()
    assert len(lines) == len(report.latency_ms) + 1
    assert lines[0].split(",")[:len(LATENCY_COLUMNS)] == LATENCY_COLUMNS
    assert all(r["config_hash"] == "h" * 64 and r["exponent_full"] == "2.0" for r in _rows(path))


def test_eval_report_csv_carries_metrics(tmp_path):
    report = EvalReport(psnr_db=31.5, ssim=0.9, frechet={"fdd": 1.25}, latent_std=0.8, config_hash="abc")
    rows = _rows(write_report(report, tmp_path / "r.csv", "csv"))
    assert rows == [{**{c: "" for c in LATENCY_COLUMNS}, "psnr_db": "31.5", "ssim": "0.9",
                     "latent_std": "0.8", "frechet_fdd": "1.25", "config_hash": "abc"}]


def test_unknown_report_format_is_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_report(_latency_report(), tmp_path / "r.txt", "txt")


TINY_FLOW = ["--set", "flow.depth=1", "--set", "flow.width=32", "--set", "flow.heads=2",
             "--set", "flow.time_freq_dim=16", "--set", "train.total_steps=2", "--set", "train.batch_size=2",
             "--set", "eval.sample_count=2", "--set", "eval.sample_steps=2"]


def test_flow_pipeline_on_identity_latents(tmp_path):
    common = ["--set", "model.kind=identity", *SMALL_DATA, "--set", "eval.budget=16", *TINY_FLOW]
    checkpoint = tmp_path / "ae" / "ae.vtkf"
    flow = tmp_path / "flow" / "flow.vtkf"

    assert main(["train-ae", "--out", str(tmp_path / "ae"), *common]) == EXIT_OK
    assert main(["train-flow", "--out", str(tmp_path / "flow"), "--checkpoint", str(checkpoint), *common]) == EXIT_OK
    assert flow.exists()
    assert len((tmp_path / "flow" / "flow_log.jsonl").read_text().splitlines()) == 2

    assert main(["sample", "--out", str(tmp_path / "samples"), "--checkpoint", str(checkpoint),
                 "--flow", str(flow), "--count", "3", "--size", "32", *common]) == EXIT_OK
    assert len(list((tmp_path / "samples" / "samples").glob("*.ppm"))) == 3

    assert main(["eval", "--out", str(tmp_path / "eval"), "--checkpoint", str(checkpoint),
                 "--flow", str(flow), *common]) == EXIT_OK
    report = read_report(tmp_path / "eval" / "report.json")
    assert set(report["frechet"]) == {"fdd", "fid", "gfdd", "gfid"}


def test_regularizer_ablation_writes_one_row_per_regularizer(tmp_path):
    argv = ["ablate-reg", "--out", str(tmp_path), *SMALL_DATA,
            "--set", "model.width=32", "--set", "model.heads=2", "--set", "model.dec_depth=1",
            "--set", "model.enc_depth=1", "--set", "model.latent_channels=4",
            "--set", "train.total_steps=1", "--set", "train.batch_size=2",
            "--set", "loss.w_perc=0", "--set", "eval.budget=16"]
    assert main(argv) == EXIT_OK

    rows = _rows(tmp_path / "ablation.csv")
    assert [r["regularizer"] for r in rows] == ["kl", "tanh_noise", "layernorm"]
    assert all(float(r["psnr_db"]) > 0 for r in rows)
    assert (tmp_path / "kl" / "ae.vtkf").exists()


def test_loss_ablation_writes_one_row_per_preset(tmp_path):
    argv = ["ablate-loss", "--out", str(tmp_path), *SMALL_DATA,
            "--set", "model.width=32", "--set", "model.heads=2", "--set", "model.dec_depth=1",
            "--set", "model.enc_depth=1", "--set", "model.latent_channels=4",
            "--set", "train.total_steps=1", "--set", "train.batch_size=2",
            "--set", "loss.tile=16", "--set", "eval.budget=16"]
    assert main(argv) == EXIT_OK

    rows = _rows(tmp_path / "ablation.csv")
    assert [r["preset"] for r in rows] == ["pixel", "pixel+ssim", "pixel+ssim+perc500", "pixel+ssim+perc1000"]
    assert {r["pareto"] for r in rows} <= {"True", "False"}
    assert any(r["pareto"] == "True" for r in rows)
    assert all(r["frechet_fdd"] != "" for r in rows)
    assert (tmp_path / "pixel+ssim+perc500" / "ae.vtkf").exists()
