"""Command-line entrypoint tests on a micro-scale world."""

import json
import os

import pytest

from masm_lwr.cli import main

MICRO_CONFIG = {
    "world": {
        "n_categories": 2,
        "products_per_category": 12,
        "queries_per_category": 3,
    },
    "model": {"d": 16, "h": 3, "w": 3, "query_max_len": 6, "title_max_len": 12},
    "train": {"max_epochs": 2, "batch_size": 64, "early_stop_patience": 5},
    "run": {
        "n_sessions": 2500,
        "eval_pairs_per_query": 10,
        "annotated_pairs_per_query": 10,
        "click_pairs_per_query": 20,
        "finetune_max_epochs": 1,
    },
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    config_path = tmp / "config.json"
    config_path.write_text(json.dumps(MICRO_CONFIG))
    wd = tmp / "out"
    rc = main(["--config", str(config_path), "--seed", "7",
               "--workdir", str(wd), "e2e"])
    assert rc == 0
    return str(config_path), str(wd)


def run(workdir, *args):
    config_path, wd = workdir
    return main(["--config", config_path, "--seed", "7", "--workdir", wd, *args])


def test_e2e_writes_all_artifacts(workdir):
    _, wd = workdir
    for name in ("world.json", "logs.ndjson", "vocab.txt", "bias.json",
                 "lwr.ndjson", "lwr_stats.json", "val.ndjson", "test.ndjson",
                 "annotated.ndjson", "masm_lwr.ckpt", "masm_click.ckpt",
                 "masm_lwr_ft.ckpt", "query_vectors.mavs",
                 "product_vectors.mavs", "summary.json"):
        assert os.path.exists(os.path.join(wd, name)), name


def test_artifacts_have_meta_sidecars(workdir):
    _, wd = workdir
    for name in ("world.json", "lwr.ndjson", "masm_lwr.ckpt", "summary.json"):
        path = os.path.join(wd, name + ".meta.json")
        with open(path, encoding="utf-8") as f:
            meta = json.load(f)
        assert meta["seed"] == 7
        assert meta["world"]["n_categories"] == 2


def test_summary_contents(workdir):
    _, wd = workdir
    with open(os.path.join(wd, "summary.json"), encoding="utf-8") as f:
        summary = json.load(f)
    for key in ("roc_auc_lwr", "roc_auc_click", "roc_auc_lwr_finetune",
                "heldout_medians", "bias_relative_max_rel_error",
                "path_equivalence_max_abs_diff", "lwr_type_shares"):
        assert key in summary
    assert 0.0 <= summary["roc_auc_lwr"] <= 1.0
    assert summary["path_equivalence_max_abs_diff"] < 1e-5


def test_evaluate_prints_json(workdir, capsys):
    _, wd = workdir
    rc = run(workdir, "evaluate",
             "--checkpoint", os.path.join(wd, "masm_lwr.ckpt"),
             "--report-name", "eval_again")
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert 0.0 <= doc["roc_auc"] <= 1.0
    assert 0.0 <= doc["neg_pr_auc"] <= 1.0
    assert os.path.exists(os.path.join(wd, "eval_again.json"))
    assert os.path.exists(os.path.join(wd, "eval_again_hist.csv"))


def test_bench_prints_json(workdir, capsys):
    _, wd = workdir
    rc = run(workdir, "bench",
             "--checkpoint", os.path.join(wd, "masm_lwr_ft.ckpt"),
             "--n-pairs", "200")
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["n_pairs"] == 200
    assert doc["speedup"] > 0.0


def test_ablate_writes_report(workdir):
    _, wd = workdir
    rc = run(workdir, "ablate", "--drop", "weak_relevant")
    assert rc == 0
    with open(os.path.join(wd, "ablation_report.json"), encoding="utf-8") as f:
        rows = json.load(f)["rows"]
    assert [r["dropped"] for r in rows] == ["weak_relevant"]
    assert 0.0 <= rows[0]["roc_auc"] <= 1.0


def test_rebuild_lwr_is_byte_identical(workdir):
    _, wd = workdir
    path = os.path.join(wd, "lwr.ndjson")
    with open(path, "rb") as f:
        before = f.read()
    assert run(workdir, "build-lwr") == 0
    with open(path, "rb") as f:
        assert f.read() == before


def test_unknown_subcommand_exits_1():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_missing_required_flag_exits_1():
    with pytest.raises(SystemExit) as exc:
        main(["evaluate"])
    assert exc.value.code == 1


def test_missing_prereq_artifact_exits_2(tmp_path):
    rc = main(["--workdir", str(tmp_path / "fresh"), "build-lwr"])
    assert rc == 2


def test_missing_checkpoint_exits_2(workdir, tmp_path):
    rc = run(workdir, "evaluate", "--checkpoint", str(tmp_path / "nope.ckpt"))
    assert rc == 2


def test_invalid_config_value_exits_2(tmp_path):
    config_path = tmp_path / "bad.json"
    config_path.write_text(json.dumps({"world": {"bias_curve": [1.0, 0.5]}}))
    rc = main(["--config", str(config_path),
               "--workdir", str(tmp_path / "out"), "simulate"])
    assert rc == 2
