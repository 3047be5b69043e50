"""Command-line pipeline: ingest -> train -> build-estimator -> search -> evaluate/export -> bench.

Every subcommand works inside a workspace directory::

    dataset/       split interactions + token maps + manifest
    checkpoints/   block embedding table, item grouping, training log
    estimator/     sampled (config, measured) pairs, estimator weights, fit report
    configs/       searched configs and search reports
    reports/       evaluation reports
    artifacts/     device artifacts and their manifests
    provenance/    one JSON record per invocation

Settings come from a flat ``key=value`` file (``--config-file``), then from
``--set key=value`` flags, then from dedicated flags, later sources winning.
Failures print one JSON line ``{"error": ..., "message": ...}`` to stderr and
exit nonzero.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import artifact as art
from . import dataset as ds_mod
from . import estimator as est
from . import evo_search
from . import grouping as grp_mod
from . import search_space as space
from . import synthetic
from . import trainer as tr
from .scoring import ElasticConfig, ElasticItemStore, evaluate_vectors, segment_sum

log = logging.getLogger("elasticrec")

DEFAULTS = {
    "data.format": "tsv",
    "data.delimiter": "",
    "data.skip_header": "false",
    "data.min_user_deg": "10",
    "data.min_item_deg": "10",
    "data.ratios": "0.7,0.1,0.2",
    "data.seed": "0",
    "synthetic.num_users": "2000",
    "synthetic.num_items": "1000",
    "synthetic.num_communities": "4",
    "synthetic.seed": "0",
    "train.d": "8",
    "train.N": "16",
    "train.L": "2",
    "train.G": "20",
    "train.lam": "1e-4",
    "train.lr": "1e-3",
    "train.epochs": "15",
    "train.batch_size": "2048",
    "train.seed": "0",
    "train.grouping": "random",
    "est.beta": "2000",
    "est.mu": "200",
    "est.d0": "64",
    "est.epochs": "300",
    "est.lr": "",
    "est.lr_grid": "1e-3,3e-3,1e-2",
    "est.batch_size": "64",
    "est.seed": "0",
    "search.P": "20",
    "search.S": "5",
    "search.C": "50",
    "search.seed": "0",
    "search.rerank_k": "0",
    "bench.repetitions": "20",
    "bench.threads": "2",
}


class CliError(Exception):
    def __init__(self, code: str, message: str, **extra):
        super().__init__(message)
        self.code, self.message, self.extra = code, message, extra


def parse_config_text(text: str) -> dict:
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError("bad_config", f"line {no}: expected key=value, got {raw!r}", line=no)
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


class Settings:
    def __init__(self, values: dict):
        self.values = values

    def get(self, key, cast=str):
        if key not in self.values:
            raise CliError("missing_setting", f"setting {key} is required")
        raw = self.values[key]
        try:
            if cast is bool:
                return raw.lower() in ("1", "true", "yes", "on")
            return cast(raw)
        except ValueError:
            raise CliError("bad_setting", f"setting {key}={raw!r} is not a valid {cast.__name__}",
                           key=key) from None

    def floats(self, key):
        raw = self.values.get(key, "")
        return [float(x) for x in raw.split(",") if x.strip()]

    def section(self, prefix):
        return {k: v for k, v in self.values.items() if k.startswith(prefix + ".")}


class Workspace:
    STAGES = {
        "dataset/manifest.json": "ingest",
        "checkpoints/table.bin": "train",
        "checkpoints/grouping.json": "train",
        "estimator/estimator.bin": "build-estimator",
    }

    def __init__(self, root):
        self.root = Path(root)

    def path(self, rel) -> Path:
        return self.root / rel

    def out(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, rel) -> Path:
        p = self.root / rel
        if not p.exists():
            stage = self.STAGES.get(rel, "the producing stage")
            raise CliError("missing_prerequisite", f"{p} not found; run `elasticrec --workspace "
                           f"{self.root} {stage}` first", file=str(p), command=stage)
        return p


def _sha(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---- stages ---------------------------------------------------------------

def cmd_ingest(ws: Workspace, st: Settings, args) -> dict:
    if args.synthetic:
        raw = synthetic.planted_interactions(
            num_users=st.get("synthetic.num_users", int), num_items=st.get("synthetic.num_items", int),
            num_communities=st.get("synthetic.num_communities", int), seed=st.get("synthetic.seed", int))
        src = ws.out("dataset/raw_interactions.tsv")
        synthetic.write_tsv(raw, src)
    elif args.input:
        src = Path(args.input)
        if not src.exists():
            raise CliError("missing_input", f"input file {src} not found", file=str(src))
    else:
        raise CliError("missing_input", "ingest needs --input PATH or --synthetic")
    ratios = tuple(st.floats("data.ratios"))
    ds = ds_mod.ingest(src, fmt=st.get("data.format"), delimiter=st.get("data.delimiter") or None,
                       skip_header=st.get("data.skip_header", bool),
                       min_user_deg=st.get("data.min_user_deg", int),
                       min_item_deg=st.get("data.min_item_deg", int),
                       ratios=ratios, seed=st.get("data.seed", int))
    ds_mod.save_dataset(ds, ws.out("dataset"))
    man = ds.manifest()
    return {"outputs": ["dataset/"], "inputs": {"source": str(src), "source_sha": _sha(src)},
            "summary": man}


def _train_config(st: Settings) -> tr.TrainConfig:
    return tr.TrainConfig(d=st.get("train.d", int), N=st.get("train.N", int), L=st.get("train.L", int),
                          G=st.get("train.G", int), lam=st.get("train.lam", float),
                          lr=st.get("train.lr", float), epochs=st.get("train.epochs", int),
                          batch_size=st.get("train.batch_size", int), seed=st.get("train.seed", int))


def cmd_train(ws: Workspace, st: Settings, args) -> dict:
    ws.need("dataset/manifest.json")
    ds = ds_mod.load_dataset(ws.path("dataset"))
    cfg = _train_config(st)
    res = tr.train(ds, cfg)
    res.table.save(ws.out("checkpoints/table.bin"))
    tr.write_history(res.history, ws.out("checkpoints/train_log.csv"))
    strategy = st.get("train.grouping")
    grouping = grp_mod.make_grouping(
        strategy, cfg.G, num_items=ds.num_items, item_degree=ds.item_degree,
        item_embeddings=res.table.item_final, seed=cfg.seed)
    grouping.save(ws.out("checkpoints/grouping.json"))
    _dump(ws.out("checkpoints/train_config.json"),
          {**tr.config_dict(cfg), "grouping": strategy, "best_epoch": res.best_epoch})
    final = res.history[-1] if res.history else {}
    return {"outputs": ["checkpoints/table.bin", "checkpoints/grouping.json", "checkpoints/train_log.csv"],
            "inputs": {"dataset_manifest_sha": _sha(ws.path("dataset/manifest.json"))},
            "summary": {"best_epoch": res.best_epoch, "last_epoch": final}}


def _load_model(ws: Workspace):
    ws.need("dataset/manifest.json")
    ds = ds_mod.load_dataset(ws.path("dataset"))
    table = tr.BlockEmbeddingTable.load(ws.need("checkpoints/table.bin"))
    grouping = grp_mod.GroupAssignment.load(ws.need("checkpoints/grouping.json"))
    if grouping.num_items != table.num_items or table.num_items != ds.num_items:
        raise CliError("stale_workspace", "dataset, table and grouping disagree on the item count; "
                       "rerun `train`")
    return ds, table, grouping


def cmd_build_estimator(ws: Workspace, st: Settings, args) -> dict:
    ds, table, grouping = _load_model(ws)
    seed = st.get("est.seed", int)
    samples = est.build_training_set(table, ds, grouping, table.N, grouping.G,
                                     st.get("est.beta", int), st.get("est.mu", int), seed)
    est.save_samples(samples, ws.out("estimator/samples.jsonl"))
    params, report = est.train_estimator(
        samples, d0=st.get("est.d0", int), seed=seed, epochs=st.get("est.epochs", int),
        lr=st.floats("est.lr")[0] if st.floats("est.lr") else None,
        lr_grid=st.floats("est.lr_grid"),
        batch_size=st.get("est.batch_size", int))
    params.save(ws.out("estimator/estimator.bin"))
    _dump(ws.out("estimator/report.json"), report.to_dict())
    return {"outputs": ["estimator/samples.jsonl", "estimator/estimator.bin", "estimator/report.json"],
            "inputs": {"table_sha": _sha(ws.path("checkpoints/table.bin"))},
            "summary": {"samples": len(samples), "lr": report.lr, "train_rmse": report.train_rmse}}


def _budget_name(mb: float) -> str:
    return f"{mb:g}MB".replace(".", "p")


def cmd_search(ws: Workspace, st: Settings, args) -> dict:
    ds, table, grouping = _load_model(ws)
    params = est.EstimatorParams.load(ws.need("estimator/estimator.bin"))
    if params.G != grouping.G or params.N != table.N:
        raise CliError("stale_workspace", "estimator does not match the trained table; "
                       "rerun `build-estimator`")
    mb = st.get("budget.mb", float)
    M = space.mb_to_bytes(mb)
    try:
        m_blocks = space.blocks_for_budget(M, table.num_items, grouping.G, table.d, table.D)
    except space.InfeasibleBudgetError as exc:
        raise CliError("infeasible_budget", str(exc), budget_bytes=M) from None
    m_blocks = min(m_blocks, table.N * grouping.G)
    sp = evo_search.SearchParams(P=st.get("search.P", int), S=st.get("search.S", int),
                                 C=st.get("search.C", int), seed=st.get("search.seed", int))
    rerank_k = st.get("search.rerank_k", int)
    rerank = None
    if rerank_k > 0:
        rerank = est.ConfigEvaluator(table.item_final, grouping.members, table.user_final, table.N,
                                     ds, "val", None, "recall", 100)
    result = evo_search.search(m_blocks, sp, params, table.N, grouping.G, rerank=rerank,
                               rerank_k=max(rerank_k, 1))
    name = _budget_name(mb)
    cfg = result.best.config
    doc = cfg.to_dict(table.d, grouping.sizes)
    doc.update({"budget_mb": mb, "budget_bytes": M, "budget_blocks": m_blocks,
                "user_slot_bytes": table.D * space.BYTES_PER_PARAM, "config_hash": cfg.digest(),
                "estimated": result.best.acc})
    _dump(ws.out(f"configs/search_{name}.json"), doc)
    report = result.report()
    report.update({"budget_mb": mb, "budget_bytes": M, "budget_blocks": m_blocks,
                   "search_params": vars(sp), "rerank_k": rerank_k})
    _dump(ws.out(f"configs/search_{name}_report.json"), report)
    return {"outputs": [f"configs/search_{name}.json", f"configs/search_{name}_report.json"],
            "inputs": {"estimator_sha": _sha(ws.path("estimator/estimator.bin"))},
            "summary": {"config_hash": cfg.digest(), "total_blocks": cfg.total_blocks,
                        "estimated": result.best.acc}}


def _read_config(path) -> tuple[ElasticConfig, dict]:
    p = Path(path)
    if not p.exists():
        raise CliError("missing_prerequisite", f"{p} not found; run `search` first",
                       file=str(p), command="search")
    obj = json.loads(p.read_text())
    return ElasticConfig.from_dict(obj), obj


def cmd_evaluate(ws: Workspace, st: Settings, args) -> dict:
    ds, table, grouping = _load_model(ws)
    if not args.config:
        raise CliError("missing_input", "evaluate needs --config FILE")
    cfg, obj = _read_config(args.config)
    if cfg.G != grouping.G or cfg.N != table.N:
        raise CliError("config_mismatch", f"config has G={cfg.G}, N={cfg.N} but the model has "
                       f"G={grouping.G}, N={table.N}")
    store = ElasticItemStore.from_item_embeddings(table.item_final, grouping.members, cfg)
    metrics = evaluate_vectors(segment_sum(table.user_final.astype(np.float64), table.N),
                               store.item_vectors(), ds.train_matrix, ds.holdout(args.split),
                               ks=(50, 100))
    hist = np.bincount(cfg.sizes, minlength=table.N + 1)
    report = {"split": args.split, "config_hash": cfg.digest(), "budget_mb": obj.get("budget_mb"),
              "budget_bytes": obj.get("budget_bytes"), "total_blocks": cfg.total_blocks,
              "payload_bytes": store.payload_bytes,
              "group_size_histogram": {str(k): int(v) for k, v in enumerate(hist) if v},
              **metrics}
    out = f"reports/eval_{cfg.digest()}_{args.split}.json"
    _dump(ws.out(out), report)
    return {"outputs": [out], "inputs": {"config_sha": _sha(args.config)}, "summary": metrics}


def cmd_export(ws: Workspace, st: Settings, args) -> dict:
    ds, table, grouping = _load_model(ws)
    if not args.config:
        raise CliError("missing_input", "export needs --config FILE")
    cfg, obj = _read_config(args.config)
    if args.budget_mb is not None:
        budget = space.mb_to_bytes(args.budget_mb)
    elif "budget_bytes" in obj:
        budget = int(obj["budget_bytes"])
    else:
        budget = space.mb_to_bytes(st.get("budget.mb", float))
    if not 0 <= args.user < table.num_users:
        raise CliError("bad_user", f"user {args.user} out of range [0, {table.num_users})")
    out = f"artifacts/user{args.user}_{cfg.digest()}.bin"
    try:
        manifest = art.export_artifact(table, grouping.members, cfg, args.user, ws.out(out), budget,
                                       seen_items=ds.user_items[args.user],
                                       token_map=str(ws.path("dataset/item_tokens.tsv")))
    except art.BudgetExceededError as exc:
        raise CliError("budget_exceeded", str(exc), needed_bytes=exc.needed,
                       budget_bytes=exc.budget, overage_bytes=exc.needed - exc.budget) from None
    return {"outputs": [out, out + ".json"], "inputs": {"config_sha": _sha(args.config)},
            "summary": {"counted_bytes": manifest["counted_bytes"], "budget_bytes": budget}}


def cmd_bench(ws: Workspace, st: Settings, args) -> dict:
    if not args.artifact:
        raise CliError("missing_input", "bench needs --artifact FILE")
    path = Path(args.artifact)
    if not path.exists():
        raise CliError("missing_prerequisite", f"{path} not found; run `export` first",
                       file=str(path), command="export")
    reps = st.get("bench.repetitions", int)
    threads = st.get("bench.threads", int)
    runs = [art.bench_inference(path, reps, threads=1)]
    if threads > 1:
        runs.append(art.bench_inference(path, reps, threads=threads))
    out = f"reports/bench_{path.stem}.json"
    _dump(ws.out(out), {"artifact": str(path), "runs": runs})
    return {"outputs": [out], "inputs": {"artifact_sha": _sha(path)}, "summary": runs}


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "build-estimator": cmd_build_estimator,
    "search": cmd_search,
    "evaluate": cmd_evaluate,
    "export": cmd_export,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elasticrec", description=__doc__.splitlines()[0])
    p.add_argument("--workspace", "-w", default="workspace", help="workspace directory")
    p.add_argument("--config-file", "-c", help="flat key=value settings file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting (repeatable)")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("ingest", help="parse, filter and split an interaction log")
    s.add_argument("--input", help="interaction file (user<TAB>item per line)")
    s.add_argument("--synthetic", action="store_true", help="generate the planted-community dataset")
    sub.add_parser("train", help="train the block embedding table and group items")
    sub.add_parser("build-estimator", help="sample configs, measure them and fit the estimator")
    s = sub.add_parser("search", help="search a config for a memory budget")
    s.add_argument("--budget-mb", type=float, help="budget in MB (10^6 bytes)")
    s = sub.add_parser("evaluate", help="score a config on a split")
    s.add_argument("--config", required=False, help="config JSON written by search")
    s.add_argument("--split", default="test", choices=("val", "test"))
    s = sub.add_parser("export", help="write a device artifact for one user")
    s.add_argument("--config", required=False)
    s.add_argument("--user", type=int, default=0)
    s.add_argument("--budget-mb", type=float, default=None,
                   help="override the budget recorded in the config")
    s = sub.add_parser("bench", help="time full-list ranking from an artifact")
    s.add_argument("--artifact")
    s.add_argument("--repetitions", type=int)
    s.add_argument("--threads", type=int)
    return p


def resolve_settings(args) -> Settings:
    values = dict(DEFAULTS)
    if args.config_file:
        path = Path(args.config_file)
        if not path.exists():
            raise CliError("missing_input", f"config file {path} not found", file=str(path))
        values.update(parse_config_text(path.read_text()))
    for item in args.set:
        values.update(parse_config_text(item))
    if getattr(args, "budget_mb", None) is not None and args.command == "search":
        values["budget.mb"] = repr(args.budget_mb)
    if getattr(args, "repetitions", None) is not None:
        values["bench.repetitions"] = str(args.repetitions)
    if getattr(args, "threads", None) is not None:
        values["bench.threads"] = str(args.threads)
    return Settings(values)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ws = Workspace(args.workspace)
    t0 = time.time()
    try:
        st = resolve_settings(args)
        record = COMMANDS[args.command](ws, st, args)
    except CliError as exc:
        print(json.dumps({"error": exc.code, "message": exc.message, **exc.extra}), file=sys.stderr)
        return 2
    except (ds_mod.DatasetError, space.InfeasibleBudgetError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except (tr.TrainingDivergedError, est.EstimatorDivergedError) as exc:
        print(json.dumps({"error": "diverged", "message": str(exc)}), file=sys.stderr)
        return 3
    record.update({
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "settings": st.values,
        "settings_hash": hashlib.sha256(json.dumps(st.values, sort_keys=True).encode()).hexdigest()[:16],
        "versions": {"elasticrec": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(t0)),
        "elapsed_s": round(time.time() - t0, 3),
    })
    stamp = time.strftime("%Y%m%d-%H%M%S", time.localtime(t0))
    prov = ws.out(f"provenance/{stamp}-{int(t0 * 1e6) % 10**6:06d}-{args.command}.json")
    _dump(prov, record)
    print(json.dumps({"ok": args.command, "outputs": record.get("outputs", []),
                      "provenance": str(prov)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
