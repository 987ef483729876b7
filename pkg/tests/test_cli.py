"""CLI contract: exit codes, config validation, and end-to-end tiny runs."""

import json

import numpy as np
import pytest

from srat import world
from srat.cli import DEFAULT_CONFIG, UsageError, load_config, main, validate_config

TINY_OVERRIDES = {
    name: {"steps": 10, "batch": 4, "dataset_count": 64}
    for name in ("base", "sr_lora", "sr_cn", "sr_bg", "adapter")
}


def run(argv):
    return main(argv)


# ---------------------------------------------------------------------------
# config


def test_default_config_roundtrips():
    assert validate_config(json.loads(json.dumps(DEFAULT_CONFIG))) == DEFAULT_CONFIG


def test_config_rejects_unknown_keys():
    with pytest.raises(UsageError):
        validate_config({"presett": "vanilla"})
    with pytest.raises(UsageError):
        validate_config({"stage_overrides": {"base": {"nope": 1}}})
    with pytest.raises(UsageError):
        validate_config({"sampler": {"bogus": 2}})


def test_config_rejects_bad_values():
    with pytest.raises(UsageError):
        validate_config({"preset": "not-real"})
    with pytest.raises(UsageError):
        validate_config({"seeds": [0, "one"]})
    with pytest.raises(UsageError):
        validate_config({"adapter_domain": "mystery"})


def test_load_config_none_gives_defaults():
    assert load_config(None) == DEFAULT_CONFIG


def test_print_config_exits_zero(capsys):
    assert run(["pipeline", "--print-config"]) == 0
    out = capsys.readouterr().out
    assert json.loads(out)["sampler"]["cfg_scale"] == 3.5


# ---------------------------------------------------------------------------
# exit codes


def test_usage_error_exit_code_2(tmp_path, capsys):
    assert run(["gen-data", "--count", "0", "--out", str(tmp_path / "d")]) == 2
    assert "error:" in capsys.readouterr().err


def test_io_error_exit_code_4(capsys):
    code = run(["eval", "--run-manifest", "/no/such/manifest.json",
                "--report-out", "/tmp/out.json"])
    assert code == 4
    assert "io error:" in capsys.readouterr().err


def test_invalid_thread_env_exit_code_2(monkeypatch, capsys):
    monkeypatch.setenv("SRAT_THREADS", "zero")
    assert run(["selftest", "--suite", "sampler"]) == 2


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_writes_loadable_deterministic_file(tmp_path, capsys):
    out_a = tmp_path / "a.sratd"
    out_b = tmp_path / "b.sratd"
    assert run(["gen-data", "--count", "20", "--seed", "3", "--out", str(out_a)]) == 0
    assert run(["gen-data", "--count", "20", "--seed", "3", "--out", str(out_b)]) == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    samples = world.load_dataset(out_a)
    assert len(samples) == 20
    assert samples[0].image.shape == (16, 16)


# ---------------------------------------------------------------------------
# selftest suites (fast ones; gradcheck is covered by unit tests directly)


@pytest.mark.parametrize("suite", ["sampler", "linear"])
def test_selftest_suite_passes(suite, capsys):
    assert run(["selftest", "--suite", suite]) == 0
    assert "max observed error" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# tiny end-to-end: pipeline -> sample -> eval -> report


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    outdir = tmp_path_factory.mktemp("cli-run")
    config = {
        "preset": "vanilla",
        "seeds": [0],
        "outdir": str(outdir),
        "stage_overrides": TINY_OVERRIDES,
        "sampler": {"steps": 4},
        "eval": {"n_refs": 16, "prior_n": 16},
    }
    cfg_path = outdir / "config.json"
    cfg_path.write_text(json.dumps(config))
    assert main(["pipeline", "--config", str(cfg_path)]) == 0
    manifest = outdir / "runs" / "vanilla-seed0" / "manifest.json"
    assert manifest.exists()
    return outdir, manifest


def test_pipeline_then_eval_and_report(tiny_run, tmp_path, capsys):
    outdir, manifest = tiny_run
    grid_cfg = tmp_path / "grid.json"
    grid_cfg.write_text(json.dumps({"n_refs": 16, "sampler": {"steps": 4}}))
    report = tmp_path / "report.json"
    assert main(["eval", "--run-manifest", str(manifest), "--grid-config", str(grid_cfg),
                 "--prior-n", "16", "--report-out", str(report)]) == 0
    payload = json.loads(report.read_text())
    assert payload["preset"] == "vanilla" and "grid_hash" in payload

    csv_out = tmp_path / "table.csv"
    assert main(["report", "--runs", str(report), "--csv-out", str(csv_out)]) == 0
    lines = csv_out.read_text().strip().splitlines()
    assert lines[0].startswith("preset,seed,")
    assert len(lines) == 3  # one row + one mean row


def test_report_rejects_mixed_grids(tiny_run, tmp_path):
    _, manifest = tiny_run
    reports = []
    for n in (16, 20):
        grid_cfg = tmp_path / f"grid{n}.json"
        grid_cfg.write_text(json.dumps({"n_refs": n, "sampler": {"steps": 4}}))
        rep = tmp_path / f"rep{n}.json"
        assert main(["eval", "--run-manifest", str(manifest), "--grid-config", str(grid_cfg),
                     "--prior-n", "16", "--report-out", str(rep)]) == 0
        reports.append(str(rep))
    assert main(["report", "--runs", *reports, "--csv-out", str(tmp_path / "bad.csv")]) == 2


def test_sample_writes_contact_sheet_and_sidecar(tiny_run, tmp_path):
    outdir, manifest = tiny_run
    ckpt = json.loads(manifest.read_text())["stages"][-1]["checkpoint"]
    refs = tmp_path / "refs.sratd"
    assert main(["gen-data", "--count", "4", "--out", str(refs)]) == 0
    sheet = tmp_path / "sheet.pgm"
    assert main(["sample", "--checkpoint", ckpt, "--reference", str(refs),
                 "--rot-bucket", "4", "--n", "4", "--steps", "4",
                 "--grid-out", str(sheet)]) == 0
    assert sheet.read_bytes().startswith(b"P5\n32 32\n255\n")
    sidecar = json.loads(sheet.with_suffix(".json").read_text())
    assert len(sidecar) == 4 and sidecar[0]["index"] == 0


def test_sample_requires_reference_for_adapter_checkpoints(tiny_run, tmp_path, capsys):
    outdir, manifest = tiny_run
    ckpt = json.loads(manifest.read_text())["stages"][-1]["checkpoint"]
    code = main(["sample", "--checkpoint", ckpt, "--n", "2", "--steps", "2",
                 "--grid-out", str(tmp_path / "x.pgm")])
    assert code == 2
    # ip-scale 0 is the documented escape hatch
    assert main(["sample", "--checkpoint", ckpt, "--n", "2", "--steps", "2",
                 "--ip-scale", "0", "--grid-out", str(tmp_path / "y.pgm")]) == 0


def test_sample_rejects_bad_bucket(tiny_run, tmp_path):
    outdir, manifest = tiny_run
    ckpt = json.loads(manifest.read_text())["stages"][-1]["checkpoint"]
    assert main(["sample", "--checkpoint", ckpt, "--rot-bucket", "9", "--n", "2",
                 "--ip-scale", "0", "--grid-out", str(tmp_path / "z.pgm")]) == 2
