import json

import pytest

from elasticrec import cli

SMALL = """
# tiny pipeline settings
synthetic.num_users = 300
synthetic.num_items = 200
train.epochs = 2
train.G = 10
est.beta = 40
est.mu = 30
est.epochs = 5
est.lr = 3e-3
search.C = 10
bench.repetitions = 3
"""


def run(ws, *args, config=None):
    argv = ["--workspace", str(ws)]
    if config:
        argv += ["--config-file", str(config)]
    return cli.main(argv + list(args))


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    ws = tmp_path_factory.mktemp("ws")
    cfg = ws / "settings.conf"
    cfg.write_text(SMALL)
    assert run(ws, "ingest", "--synthetic", config=cfg) == 0
    assert run(ws, "train", config=cfg) == 0
    assert run(ws, "build-estimator", config=cfg) == 0
    assert run(ws, "search", "--budget-mb", "0.01", config=cfg) == 0
    return ws, cfg


def test_stage_outputs(pipeline):
    ws, _ = pipeline
    for rel in ("dataset/manifest.json", "dataset/item_tokens.tsv", "checkpoints/table.bin",
                "checkpoints/grouping.json", "checkpoints/train_log.csv",
                "estimator/samples.jsonl", "estimator/estimator.bin",
                "configs/search_0p01MB.json", "configs/search_0p01MB_report.json"):
        assert (ws / rel).exists(), rel
    conf = json.loads((ws / "configs/search_0p01MB.json").read_text())
    assert conf["bytes"] + conf["user_slot_bytes"] <= conf["budget_bytes"] == 10_000
    rep = json.loads((ws / "configs/search_0p01MB_report.json").read_text())
    assert len(rep["rounds"]) == 10 and "wall_time_s" in rep


def test_flags_override_file(pipeline):
    ws, cfg = pipeline
    assert run(ws, "--set", "search.C=0", "search", "--budget-mb", "0.008", config=cfg) == 0
    rep = json.loads((ws / "configs/search_0p008MB_report.json").read_text())
    assert rep["rounds"] == [] and rep["budget_bytes"] == 8000


def test_evaluate_report(pipeline, capsys):
    ws, cfg = pipeline
    capsys.readouterr()
    assert run(ws, "evaluate", "--config", str(ws / "configs/search_0p01MB.json"),
               "--split", "test", config=cfg) == 0
    out = last_json(capsys.readouterr().out)
    rep = json.loads((ws / out["outputs"][0]).read_text())
    for key in ("recall@50", "recall@100", "ndcg@50", "ndcg@100", "config_hash",
                "budget_bytes", "group_size_histogram"):
        assert key in rep
    assert sum(rep["group_size_histogram"].values()) == 10


def test_export_and_bench(pipeline, capsys):
    ws, cfg = pipeline
    capsys.readouterr()
    assert run(ws, "export", "--config", str(ws / "configs/search_0p01MB.json"), "--user", "3",
               config=cfg) == 0
    out = last_json(capsys.readouterr().out)
    art = ws / out["outputs"][0]
    man = json.loads((ws / out["outputs"][1]).read_text())
    assert man["counted_bytes"] <= man["budget_bytes"]
    assert run(ws, "bench", "--artifact", str(art), "--threads", "2", config=cfg) == 0
    out = last_json(capsys.readouterr().out)
    bench = json.loads((ws / out["outputs"][0]).read_text())
    assert [r["threads"] for r in bench["runs"]] == [1, 2]


def test_export_over_budget_is_refused(pipeline, capsys):
    ws, cfg = pipeline
    capsys.readouterr()
    code = run(ws, "export", "--config", str(ws / "configs/search_0p01MB.json"),
               "--budget-mb", "0.001", config=cfg)
    err = json.loads(capsys.readouterr().err.strip())
    assert code != 0 and err["error"] == "budget_exceeded" and err["overage_bytes"] > 0


def test_infeasible_budget_error(pipeline, capsys):
    ws, cfg = pipeline
    capsys.readouterr()
    assert run(ws, "search", "--budget-mb", "0.0001", config=cfg) != 0
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "infeasible_budget" and "minimum feasible" in err["message"]


def test_provenance_records(pipeline):
    ws, _ = pipeline
    recs = [json.loads(p.read_text()) for p in (ws / "provenance").glob("*.json")]
    cmds = {r["command"] for r in recs}
    assert {"ingest", "train", "build-estimator", "search"} <= cmds
    for r in recs:
        assert "settings_hash" in r and "versions" in r and r["settings"]["train.seed"] == "0"


def test_missing_prerequisite_names_file_and_command(tmp_path, capsys):
    assert run(tmp_path, "train") == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "missing_prerequisite"
    assert err["file"].endswith("dataset/manifest.json") and err["command"] == "ingest"


def test_missing_estimator(tmp_path, capsys, pipeline):
    ws, cfg = pipeline
    import shutil
    clone = tmp_path / "ws"
    shutil.copytree(ws, clone)
    (clone / "estimator/estimator.bin").unlink()
    assert run(clone, "search", "--budget-mb", "0.01", config=cfg) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["command"] == "build-estimator"


def test_bad_config_line(tmp_path, capsys):
    bad = tmp_path / "bad.conf"
    bad.write_text("train.lr 0.1\n")
    assert run(tmp_path, "ingest", "--synthetic", config=bad) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "bad_config"


def test_ingest_from_file(tmp_path):
    src = tmp_path / "log.tsv"
    src.write_text("".join(f"u{u}\ti{(u + k) % 12}\n" for u in range(12) for k in range(10)))
    assert run(tmp_path / "ws", "ingest", "--input", str(src)) == 0
    man = json.loads((tmp_path / "ws/dataset/manifest.json").read_text())
    assert man["num_users"] == 12 and man["num_train"] == 12 * 7


def test_grouping_strategies(tmp_path, pipeline):
    import shutil
    ws, cfg = pipeline
    for strategy in ("popularity", "clustering"):
        clone = tmp_path / strategy
        shutil.copytree(ws, clone)
        assert run(clone, "--set", f"train.grouping={strategy}", "train", config=cfg) == 0
        doc = json.loads((clone / "checkpoints/grouping.json").read_text())
        assert doc["strategy"] == strategy and doc["G"] == 10
        sizes = [len(m) for m in doc["members"]]
        assert max(sizes) - min(sizes) <= 1
