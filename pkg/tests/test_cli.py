import json
import subprocess
import sys

import numpy as np
import pytest

from wsialign import cli

TINY = """\
schema_version: 1
extends: desk
synth:
  cases: 16
split:
  fractions: [0.75, 0.25, 0.0]
stage1:
  query_dim: 32
  intermediate_dim: 64
  itc_proj_dim: 16
  max_steps: 12
  warmup_steps: 2
  batch_size: 6
  eval_every: 6
  patience: 0
  variants:
    G: {max_steps: 6, warmup_steps: 2, eval_every: 3}
decoder:
  dim: 32
  n_layers: 1
  n_heads: 2
  steps: 12
  eval_every: 6
stage2:
  max_steps: 6
  warmup_steps: 2
  batch_size: 6
  eval_every: 3
  max_text_len: 40
eval:
  bootstrap_replicates: 50
"""

PIPELINE = [
    ["synth"], ["parse"], ["split"], ["tile"], ["embed"],
    ["train-stage1", "--variant", "R"], ["train-stage1", "--variant", "G"], ["train-stage2"],
    ["retrieve", "--direction", "image2text", "--k", "10"],
    ["retrieve", "--direction", "text2image", "--k", "5"],
    ["retrieve", "--direction", "image2image", "--k", "5"],
    ["classify"], ["generate"], ["prioritize"], ["eval-text"], ["report"],
]


def _run(wd, cfg, argv):
    return cli.main([argv[0], "--workdir", str(wd), "--config", str(cfg), *argv[1:]])


def _manifest_name(argv):
    name = argv[0]
    opts = dict(zip(argv[1::2], argv[2::2]))
    if name in ("train-stage1", "retrieve", "classify"):
        name += f"-{opts.get('--variant', 'R')}"
    if "--direction" in opts:
        name += f"-{opts['--direction']}"
    if name.split("-")[0] in ("retrieve", "classify", "generate", "prioritize", "eval") and name != "split":
        name += "-validation"
    return name


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    outputs = {}
    for tag in ("a", "b"):
        wd = root / tag
        for argv in PIPELINE:
            assert _run(wd, cfg, argv) == 0, argv
            man = json.loads((wd / "manifests" / f"{_manifest_name(argv)}.json").read_text())
            outputs.setdefault(tag, {})[" ".join(argv)] = man["outputs"]
    return root, cfg, outputs


def test_pipeline_runs_and_manifests_verify(runs):
    root, _, _ = runs
    wd = root / "a"
    mans = sorted((wd / "manifests").glob("*.json"))
    assert len(mans) == len(PIPELINE)
    for m in mans:
        if m.stem != "report":
            assert cli.verify_manifest(m, wd) == []


def test_every_subcommand_is_bit_identical_across_runs(runs):
    _, _, outputs = runs
    for step, outs in outputs["a"].items():
        if step == "report":
            continue  # the report embeds run timings
        assert outs == outputs["b"][step], step


def test_rerun_in_place_is_idempotent(runs):
    root, cfg, outputs = runs
    wd = root / "a"
    for argv in (["synth"], ["split"], ["train-stage1", "--variant", "R"], ["prioritize"]):
        assert _run(wd, cfg, argv) == 0
        man = json.loads((wd / "manifests" / f"{_manifest_name(argv)}.json").read_text())
        assert man["outputs"] == outputs["a"][" ".join(argv)]


def test_retrieval_result_invariants(runs):
    root, _, _ = runs
    for path in (root / "a" / "results").glob("retrieve-*.json"):
        m = json.loads(path.read_text())["metrics"]
        tops = [m[k] for k in ("top1", "top5", "top10") if m[k] is not None]
        assert tops == sorted(tops)
        assert 0 <= m["MAP"] <= 1 and 0 <= m["NDCG"] <= 1


def test_report_reconstructs_configuration(runs):
    root, _, _ = runs
    wd = root / "a"
    report = json.loads((wd / "report.json").read_text())
    for name, run in report["runs"].items():
        man = json.loads((wd / "manifests" / f"{name}.json").read_text())
        assert run["config"] == man["config"]
        assert cli.config_hash(run["config"]) == man["config_hash"] == run["config_hash"]
        assert run["seeds"] == man["seeds"]
    assert report["retrieval"] and report["classification"] and report["generation"] and report["prioritization"]
    md = (wd / "report.md").read_text()
    for title in ("## Retrieval", "## Zero-shot classification", "## Text generation", "## Prioritization"):
        assert title in md


def test_stage2_keeps_decoder_checksum(runs):
    root, _, _ = runs
    res = json.loads((root / "a" / "results" / "train-stage2.json").read_text())
    assert res["decoder_checksum_before"] == res["decoder_checksum_after"]


def test_priorities_file_is_sorted(runs):
    root, _, _ = runs
    rows = [json.loads(x) for x in (root / "a" / "results" / "priorities-validation.jsonl").read_text().splitlines()]
    assert rows and set(rows[0]) == {"slide_id", "score", "raw_response", "flagged"}
    keys = [(-r["score"], r["slide_id"]) for r in rows]
    assert keys == sorted(keys)


def test_synth_flags_override_config(tmp_path, runs):
    _, cfg, _ = runs
    assert _run(tmp_path, cfg, ["synth", "--seed", "13", "--classes", "8", "--cases", "4"]) == 0
    man = json.loads((tmp_path / "manifests" / "synth.json").read_text())
    assert man["config"]["synth"]["cases"] == 4 and man["extra"]["n_cases"] == 4


def test_synth_twice_identical_corpus(tmp_path):
    sums = []
    for tag in ("x", "y"):
        assert cli.main(["synth", "--workdir", str(tmp_path / tag), "--seed", "13", "--classes", "8",
                         "--cases", "12"]) == 0
        sums.append(cli.sha256_file(tmp_path / tag / "corpus" / "reports.jsonl"))
    assert sums[0] == sums[1]


# ------------------------------------------------------------ exit codes

def _error_record(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_missing_input_is_data_error(tmp_path, capsys):
    assert cli.main(["parse", "--workdir", str(tmp_path)]) == 3
    rec = _error_record(capsys)
    assert rec["exit_code"] == 3 and rec["command"] == "parse" and rec["error"] == "DataError"


def test_bad_config_is_config_error(tmp_path, capsys):
    assert cli.main(["synth", "--workdir", str(tmp_path), "--config", "nope"]) == 2
    assert _error_record(capsys)["error"] == "ConfigError"
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 7\n")
    assert cli.main(["synth", "--workdir", str(tmp_path), "--config", str(bad)]) == 2
    assert cli.main(["synth", "--workdir", str(tmp_path), "--set", "synth.nokey=1"]) == 2
    assert cli.main(["synth", "--workdir", str(tmp_path), "--set", "justtext"]) == 2


def test_circular_extends(tmp_path):
    a, b = tmp_path / "a.yaml", tmp_path / "b.yaml"
    a.write_text(f"schema_version: 1\nextends: {b}\n")
    b.write_text(f"schema_version: 1\nextends: {a}\n")
    with pytest.raises(cli.ConfigError):
        cli.load_config(str(a))


def test_numeric_failure_exit_code(runs, tmp_path, monkeypatch, capsys):
    from wsialign import qformer as qf

    root, cfg, _ = runs
    real = qf.compute_losses

    def poisoned(*a, **k):
        out = real(*a, **k)
        out["total"] = out["total"] * float("nan")
        return out

    monkeypatch.setattr(qf, "compute_losses", poisoned)
    wd = root / "a"
    assert _run(wd, cfg, ["train-stage1", "--variant", "R", "--max-steps", "3"]) == 4
    rec = _error_record(capsys)
    assert rec["error"] == "NonFiniteLoss" and rec["exit_code"] == 4


def test_presets_load():
    r, g, d = (cli.load_config(n) for n in ("stage1-R", "stage1-G", "desk"))
    assert r["stage1"]["variant"] == "R" and g["stage1"]["variant"] == "G"
    assert r["stage1"]["batch_size"] == 1024 and r["stage1"]["lr"] == 1e-4
    assert r["stage2"]["grad_clip_norm"] == 10.0 and r["stage2"]["lr"] == 5e-5
    assert d["synth"]["cases"] == 320 and d["stage1"]["batch_size"] == 32
    assert cli.stage1_settings(r, "G")["n_queries"] == 32


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "wsialign", "--help"], capture_output=True, text=True, check=True)
    for name in ("synth", "train-stage1", "prioritize", "report"):
        assert name in out.stdout
