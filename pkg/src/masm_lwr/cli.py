"""Command-line entrypoint chaining the full workflow.

Subcommands: simulate, estimate-bias, build-lwr, train, finetune,
evaluate, ablate, export-vectors, serve, bench, e2e. Configuration comes
from an optional JSON file plus flag overrides (flags win); every artifact
gets a sidecar `<name>.meta.json` recording the seed and config that
produced it, and `e2e` runs the whole pipeline deterministically from one
seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import clicksim, model as M, pipeline, serving, training
from .clicksim import ImpressionLog, World, WorldConfig
from .corpus import Vocabulary, build_vocab
from .evaluation import (ablation_run, evaluate_scores, save_histogram_csv)
from .pipeline import PipelineConfig, PositionBiasTable, RelevanceType
from .training import TrainConfig

log = logging.getLogger("masm_lwr")

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


class RunConfig:
    """Resolved configuration: world + pipeline + model + training + run knobs."""

    def __init__(self, seed: int, workdir: str, doc: dict | None = None):
        doc = doc or {}
        self.seed = seed
        self.workdir = workdir
        os.makedirs(workdir, exist_ok=True)
        self.world = WorldConfig(**{"seed": seed, **doc.get("world", {})})
        self.pipeline = PipelineConfig(**{"seed": seed + 2, **doc.get("pipeline", {})})
        self.model = dict(doc.get("model", {}))  # vocab_size filled at build time
        self.train = TrainConfig(**{"shuffle_seed": seed + 4, **doc.get("train", {})})
        run = doc.get("run", {})
        self.n_sessions = run.get("n_sessions", 60000)
        self.eval_pairs_per_query = run.get("eval_pairs_per_query", 40)
        self.annotated_pairs_per_query = run.get("annotated_pairs_per_query", 40)
        self.heldout_fraction = run.get("heldout_fraction", 0.1)
        self.click_pairs_per_query = run.get("click_pairs_per_query", 80)
        self.finetune_max_epochs = run.get("finetune_max_epochs", 15)

    def model_config(self, vocab_size: int) -> M.ModelConfig:
        return M.ModelConfig(vocab_size=vocab_size, **self.model)

    def doc(self) -> dict:
        return {
            "seed": self.seed,
            "world": clicksim._config_doc(self.world),
            "pipeline": {**asdict(self.pipeline),
                         "mixture": {t.value: v for t, v in self.pipeline.mixture.items()}},
            "model": self.model,
            "train": asdict(self.train),
            "run": {
                "n_sessions": self.n_sessions,
                "eval_pairs_per_query": self.eval_pairs_per_query,
                "annotated_pairs_per_query": self.annotated_pairs_per_query,
                "heldout_fraction": self.heldout_fraction,
                "click_pairs_per_query": self.click_pairs_per_query,
                "finetune_max_epochs": self.finetune_max_epochs,
            },
        }

    def path(self, name: str) -> str:
        return os.path.join(self.workdir, name)

    def write_meta(self, artifact_path: str) -> None:
        with open(artifact_path + ".meta.json", "w", encoding="utf-8") as f:
            json.dump(self.doc(), f, sort_keys=True, separators=(",", ":"))


def _load_cfg(args) -> RunConfig:
    doc = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            doc = json.load(f)
    seed = args.seed if args.seed is not None else doc.get("seed", 42)
    os.makedirs(args.workdir, exist_ok=True)
    return RunConfig(seed, args.workdir, doc)


# -- pipeline stages (shared by subcommands and e2e) -----------------------

def stage_simulate(cfg: RunConfig) -> tuple[World, ImpressionLog]:
    world = clicksim.generate_world(cfg.world)
    world.save(cfg.path("world.json"))
    cfg.write_meta(cfg.path("world.json"))
    impressions = clicksim.simulate_logs(world, cfg.n_sessions, seed=cfg.seed + 1)
    impressions.save(cfg.path("logs.ndjson"))
    cfg.write_meta(cfg.path("logs.ndjson"))
    log.info("simulated %d impressions (%d sessions skipped)",
             len(impressions), impressions.n_skipped)

    streams = [list(q.tokens) for q in world.queries]
    streams += [list(p.title_tokens) for p in world.products]
    vocab = build_vocab(streams, min_freq=1)
    vocab.save(cfg.path("vocab.txt"))
    return world, impressions


def _load_world_log(cfg: RunConfig) -> tuple[World, ImpressionLog]:
    world = World.load(cfg.path("world.json"))
    impressions = ImpressionLog.load(
        cfg.path("logs.ndjson"),
        [q.query_id for q in world.queries],
        [p.product_id for p in world.products],
    )
    return world, impressions


def stage_estimate_bias(cfg: RunConfig, world: World,
                        impressions: ImpressionLog) -> PositionBiasTable:
    table = pipeline.estimate_bias(impressions, cfg.pipeline, cfg.world.page_size)
    table.save(cfg.path("bias.json"))
    cfg.write_meta(cfg.path("bias.json"))
    return table


def stage_build_lwr(cfg: RunConfig, world: World, impressions: ImpressionLog,
                    table: PositionBiasTable):
    report = pipeline.build_lwr(impressions, table, world, cfg.pipeline,
                                cfg.path("lwr.ndjson"))
    report.save(cfg.path("lwr_stats.json"))
    cfg.write_meta(cfg.path("lwr.ndjson"))
    return report


def stage_eval_sets(cfg: RunConfig, world: World) -> None:
    for name, seed in (("val", cfg.seed + 5), ("test", cfg.seed + 6),
                       ("annotated", cfg.seed + 7)):
        n = cfg.annotated_pairs_per_query if name == "annotated" else cfg.eval_pairs_per_query
        pairs = clicksim.sample_eval_set(world, pairs_per_query=n, seed=seed)
        clicksim.save_eval_set(pairs, cfg.path(f"{name}.ndjson"))
        cfg.write_meta(cfg.path(f"{name}.ndjson"))


def _split_heldout(records: list[dict], fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    train, held = [], []
    for t in RelevanceType:
        rows = [r for r in records if r["type"] == t.value]
        n_held = int(round(len(rows) * fraction))
        chosen = set(rng.choice(len(rows), size=n_held, replace=False)) if n_held else set()
        for i, r in enumerate(rows):
            (held if i in chosen else train).append(r)
    return train, held


def _encoded_eval(cfg: RunConfig, vocab, model_config, name: str):
    pairs = clicksim.load_eval_set(cfg.path(f"{name}.ndjson"))
    return training.encode_annotated_records(pairs, vocab, model_config)


def stage_train(cfg: RunConfig, objective: str = "lwr"):
    vocab = Vocabulary.load(cfg.path("vocab.txt"))
    model_config = cfg.model_config(vocab.size)
    val = _encoded_eval(cfg, vocab, model_config, "val")
    meta = {"vocab_hash": vocab.content_hash(), "seed": cfg.seed}
    params = M.MasmParameters.init(model_config, seed=cfg.seed + 3)
    if objective == "lwr":
        records = pipeline.load_lwr(cfg.path("lwr.ndjson"))
        train_records, _ = _split_heldout(records, cfg.heldout_fraction, cfg.seed + 8)
        train = training.encode_lwr_records(train_records, vocab, model_config)
        result = training.train_lwr(train, val, params, cfg.train,
                                    log_path=cfg.path("train_lwr.log.ndjson"))
        out = cfg.path("masm_lwr.ckpt")
    elif objective == "click":
        world, impressions = _load_world_log(cfg)
        queries, pos_t, neg_t = training.build_click_pairs(
            impressions, world, cfg.click_pairs_per_query, seed=cfg.seed + 9)
        result = training.train_pairwise_click(
            queries, pos_t, neg_t, vocab, val, params, cfg.train,
            log_path=cfg.path("train_click.log.ndjson"))
        out = cfg.path("masm_click.ckpt")
    else:
        raise ValueError(f"unknown objective {objective!r}")
    result.params.save(out, meta=meta)
    cfg.write_meta(out)
    log.info("%s training done, best val ROC-AUC %.4f", objective, result.best_val_roc_auc)
    return result


def stage_finetune(cfg: RunConfig, checkpoint: str | None = None):
    vocab = Vocabulary.load(cfg.path("vocab.txt"))
    checkpoint = checkpoint or cfg.path("masm_lwr.ckpt")
    params, meta = M.MasmParameters.load(checkpoint)
    if meta.get("vocab_hash") != vocab.content_hash():
        raise ValueError("vocabulary hash mismatch between checkpoint and data")
    model_config = params.config
    train = _encoded_eval(cfg, vocab, model_config, "annotated")
    val = _encoded_eval(cfg, vocab, model_config, "val")
    ft_config = replace(cfg.train, max_epochs=cfg.finetune_max_epochs)
    result = training.finetune(params, train, val, ft_config,
                               log_path=cfg.path("finetune.log.ndjson"))
    out = cfg.path("masm_lwr_ft.ckpt")
    result.params.save(out, meta=meta)
    cfg.write_meta(out)
    return result


def stage_evaluate(cfg: RunConfig, checkpoint: str, report_name: str):
    vocab = Vocabulary.load(cfg.path("vocab.txt"))
    params, _ = M.MasmParameters.load(checkpoint)
    test = _encoded_eval(cfg, vocab, params.config, "test")
    scores = M.score_batch(params, test.q_ids, test.q_valid, test.t_ids, test.t_valid)
    report = evaluate_scores(scores, test.target.astype(int))
    report.save(cfg.path(f"{report_name}.json"))
    save_histogram_csv(report.histogram, cfg.path(f"{report_name}_hist.csv"))
    cfg.write_meta(cfg.path(f"{report_name}.json"))
    return report


def stage_heldout_medians(cfg: RunConfig, checkpoint: str) -> dict:
    vocab = Vocabulary.load(cfg.path("vocab.txt"))
    params, _ = M.MasmParameters.load(checkpoint)
    records = pipeline.load_lwr(cfg.path("lwr.ndjson"))
    _, held = _split_heldout(records, cfg.heldout_fraction, cfg.seed + 8)
    if not held:
        return {}
    enc = training.encode_lwr_records(held, vocab, params.config)
    scores = M.score_batch(params, enc.q_ids, enc.q_valid, enc.t_ids, enc.t_valid)
    medians = {}
    for t in RelevanceType:
        sel = np.array([r["type"] == t.value for r in held])
        if sel.any():
            medians[t.value] = float(np.median(scores[sel]))
    return medians


def stage_export_vectors(cfg: RunConfig, checkpoint: str):
    vocab = Vocabulary.load(cfg.path("vocab.txt"))
    world = World.load(cfg.path("world.json"))
    q_items = [(q.query_id, list(q.tokens)) for q in world.queries]
    p_items = [(p.product_id, list(p.title_tokens)) for p in world.products]
    q_store = serving.export_vectors(checkpoint, q_items, "query", vocab)
    p_store = serving.export_vectors(checkpoint, p_items, "product", vocab)
    q_store.save(cfg.path("query_vectors.mavs"))
    p_store.save(cfg.path("product_vectors.mavs"))
    cfg.write_meta(cfg.path("query_vectors.mavs"))
    cfg.write_meta(cfg.path("product_vectors.mavs"))
    return q_store, p_store


def stage_path_equivalence(cfg: RunConfig, checkpoint: str, q_store, p_store,
                           n_pairs: int = 2000) -> float:
    """Max |full - precomputed| over random known pairs (float32 store)."""
    vocab = Vocabulary.load(cfg.path("vocab.txt"))
    world = World.load(cfg.path("world.json"))
    params, _ = M.MasmParameters.load(checkpoint)
    rng = np.random.default_rng(cfg.seed + 10)
    qi = rng.integers(0, len(world.queries), size=n_pairs)
    pi = rng.integers(0, len(world.products), size=n_pairs)
    from .corpus import encode_batch
    q_ids, q_valid = encode_batch([list(world.queries[i].tokens) for i in qi],
                                  vocab, params.config.query_max_len)
    t_ids, t_valid = encode_batch([list(world.products[i].title_tokens) for i in pi],
                                  vocab, params.config.title_max_len)
    full = M.score_batch(params, q_ids, q_valid, t_ids, t_valid)
    qv = np.stack([q_store.get(world.queries[i].query_id) for i in qi])
    pv = np.stack([p_store.get(world.products[i].product_id) for i in pi])
    fast = serving.score_from_vectors(qv, pv, params)
    return float(np.max(np.abs(full - fast)))


def run_e2e(cfg: RunConfig) -> dict:
    world, impressions = stage_simulate(cfg)
    table = stage_estimate_bias(cfg, world, impressions)
    stats = stage_build_lwr(cfg, world, impressions, table)
    stage_eval_sets(cfg, world)
    lwr_result = stage_train(cfg, "lwr")
    click_result = stage_train(cfg, "click")
    ft_result = stage_finetune(cfg)
    rep_lwr = stage_evaluate(cfg, cfg.path("masm_lwr.ckpt"), "eval_lwr")
    rep_click = stage_evaluate(cfg, cfg.path("masm_click.ckpt"), "eval_click")
    rep_ft = stage_evaluate(cfg, cfg.path("masm_lwr_ft.ckpt"), "eval_lwr_ft")
    medians = stage_heldout_medians(cfg, cfg.path("masm_lwr.ckpt"))
    q_store, p_store = stage_export_vectors(cfg, cfg.path("masm_lwr_ft.ckpt"))
    max_diff = stage_path_equivalence(cfg, cfg.path("masm_lwr_ft.ckpt"), q_store, p_store)

    test = clicksim.load_eval_set(cfg.path("test.ndjson"))
    good_share = float(np.mean([r["label"] for r in test]))
    gen_curve = np.asarray(cfg.world.bias_curve)
    rel_est = np.asarray(table.relative)
    bias_max_rel_err = float(np.max(np.abs(rel_est - gen_curve / gen_curve[0])
                                    / (gen_curve / gen_curve[0])))
    summary = {
        "seed": cfg.seed,
        "roc_auc_lwr": rep_lwr.roc_auc,
        "roc_auc_click": rep_click.roc_auc,
        "roc_auc_lwr_finetune": rep_ft.roc_auc,
        "neg_pr_auc_lwr": rep_lwr.neg_pr_auc,
        "neg_pr_auc_click": rep_click.neg_pr_auc,
        "neg_pr_auc_lwr_finetune": rep_ft.neg_pr_auc,
        "val_roc_auc_lwr": lwr_result.best_val_roc_auc,
        "val_roc_auc_click": click_result.best_val_roc_auc,
        "val_roc_auc_finetune": ft_result.best_val_roc_auc,
        "heldout_medians": medians,
        "test_positive_share": good_share,
        "bias_relative_max_rel_error": bias_max_rel_err,
        "path_equivalence_max_abs_diff": max_diff,
        "lwr_dataset_total": stats.total,
        "lwr_type_shares": {t: v["share"] for t, v in stats.per_type.items()},
    }
    with open(cfg.path("summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, sort_keys=True, separators=(",", ":"), indent=None)
    cfg.write_meta(cfg.path("summary.json"))
    return summary


def run_ablate(cfg: RunConfig, drop: str) -> dict:
    vocab = Vocabulary.load(cfg.path("vocab.txt"))
    model_config = cfg.model_config(vocab.size)
    records = pipeline.load_lwr(cfg.path("lwr.ndjson"))
    train_records, _ = _split_heldout(records, cfg.heldout_fraction, cfg.seed + 8)
    val = _encoded_eval(cfg, vocab, model_config, "val")
    test = _encoded_eval(cfg, vocab, model_config, "test")
    drops = [t.value for t in RelevanceType] if drop == "all" else [drop]
    report_path = cfg.path("ablation_report.json")
    rows = []
    if os.path.exists(report_path):
        with open(report_path, encoding="utf-8") as f:
            rows = json.load(f)["rows"]
    for d in drops:
        report, result = ablation_run(train_records, d, vocab, model_config,
                                      cfg.train, val, test, init_seed=cfg.seed + 3)
        rows = [r for r in rows if r["dropped"] != d]
        rows.append({"dropped": d, "roc_auc": report.roc_auc,
                     "neg_pr_auc": report.neg_pr_auc,
                     "val_roc_auc": result.best_val_roc_auc})
        log.info("ablation w/o %s: ROC-AUC %.4f", d, report.roc_auc)
    rows.sort(key=lambda r: r["dropped"])
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump({"rows": rows}, f, sort_keys=True, separators=(",", ":"))
    cfg.write_meta(report_path)
    return {"rows": rows}


def run_bench(cfg: RunConfig, checkpoint: str, n_pairs: int) -> dict:
    vocab = Vocabulary.load(cfg.path("vocab.txt"))
    world = World.load(cfg.path("world.json"))
    params, _ = M.MasmParameters.load(checkpoint)
    rng = np.random.default_rng(cfg.seed + 11)
    qi = rng.integers(0, len(world.queries), size=n_pairs)
    pi = rng.integers(0, len(world.products), size=n_pairs)
    pairs = [(list(world.queries[a].tokens), list(world.products[b].title_tokens))
             for a, b in zip(qi, pi)]
    report = serving.bench(params, vocab, pairs)
    with open(cfg.path("bench.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, separators=(",", ":"))
    return report


def run_serve(cfg: RunConfig, checkpoint: str, host: str, port: int) -> None:
    vocab = Vocabulary.load(cfg.path("vocab.txt"))
    q_store = p_store = None
    if os.path.exists(cfg.path("query_vectors.mavs")):
        q_store = serving.VectorStore.load(cfg.path("query_vectors.mavs"))
    if os.path.exists(cfg.path("product_vectors.mavs")):
        p_store = serving.VectorStore.load(cfg.path("product_vectors.mavs"))
    engine = serving.ScoringEngine(checkpoint, vocab, q_store, p_store)
    server = serving.make_server(engine, host, port)
    log.info("serving on %s:%d", host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()


# -- argument parsing ------------------------------------------------------

def build_parser() -> UsageParser:
    parser = UsageParser(prog="masm-lwr", description=__doc__)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workdir", default="out")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", help="generate world, simulate logs, build vocab")
    sub.add_parser("estimate-bias", help="estimate position bias from randomized logs")
    sub.add_parser("build-lwr", help="construct the five-level training dataset")
    p = sub.add_parser("train", help="train from the level-wise or click data")
    p.add_argument("--objective", choices=["lwr", "click"], default="lwr")
    p = sub.add_parser("finetune", help="fine-tune on annotated pairs")
    p.add_argument("--checkpoint", default=None)
    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report-name", default="eval")
    p = sub.add_parser("ablate", help="retrain with one data level dropped")
    p.add_argument("--drop", required=True,
                   choices=[t.value for t in RelevanceType] + ["all"])
    p = sub.add_parser("export-vectors", help="precompute aspect vectors")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("serve", help="run the HTTP scoring service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p = sub.add_parser("bench", help="compare full vs precomputed scoring cost")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-pairs", type=int, default=10000)
    sub.add_parser("e2e", help="run the whole pipeline and write summary.json")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("LWR_LOG_LEVEL", "info").upper(),
                      logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_cfg(args)
        if args.command == "simulate":
            stage_simulate(cfg)
        elif args.command == "estimate-bias":
            world, impressions = _load_world_log(cfg)
            stage_estimate_bias(cfg, world, impressions)
        elif args.command == "build-lwr":
            if not os.path.exists(cfg.path("bias.json")):
                raise FileNotFoundError(
                    "bias.json not found; run the estimate-bias subcommand first")
            world, impressions = _load_world_log(cfg)
            table = PositionBiasTable.load(cfg.path("bias.json"))
            stage_build_lwr(cfg, world, impressions, table)
            stage_eval_sets(cfg, world)
        elif args.command == "train":
            stage_train(cfg, args.objective)
        elif args.command == "finetune":
            stage_finetune(cfg, args.checkpoint)
        elif args.command == "evaluate":
            report = stage_evaluate(cfg, args.checkpoint, args.report_name)
            print(json.dumps({"roc_auc": report.roc_auc,
                              "neg_pr_auc": report.neg_pr_auc}))
        elif args.command == "ablate":
            run_ablate(cfg, args.drop)
        elif args.command == "export-vectors":
            stage_export_vectors(cfg, args.checkpoint)
        elif args.command == "serve":
            run_serve(cfg, args.checkpoint, args.host, args.port)
        elif args.command == "bench":
            print(json.dumps(run_bench(cfg, args.checkpoint, args.n_pairs)))
        elif args.command == "e2e":
            summary = run_e2e(cfg)
            print(json.dumps(summary, sort_keys=True))
    except (clicksim.ConfigError, pipeline.EstimationError, ValueError,
            KeyError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
