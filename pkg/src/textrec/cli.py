"""Command-line entry point: preprocess -> build-vocab -> train -> encode -> evaluate -> analyze."""
from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import numpy as np
import torch

from . import analysis, corpus
from .config import ConfigError, RunConfig, dump_config, flatten, load_config, set_key
from .corpus import DataError
from .encoder import ModelConfig, init_params, load_checkpoint, save_checkpoint, checkpoint_fingerprint
from .ranker import encode_catalog, evaluate, read_rankings, write_embeddings, write_rankings, write_report
from .training import (NegativeStrategy, NumericError, TrainConfig, build_popular_set, encode_examples,
                       mine_hard_negatives, prepare_training_data, train)
from .verbalize import TokenVocab, VerbalizeConfig, build_item_table, build_vocab, verbalize_history, verbalize_item

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class StaleArtifactError(DataError):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class Workspace:
    """Artifact layout under the configured workdir."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = cfg.workdir
        self.split_dir = self.root / "split"
        self.catalog_path = self.root / "catalog.jsonl"
        self.histories_path = self.root / "histories.jsonl"
        self.stats_path = self.root / "stats.json"
        self.vocab_path = self.root / "vocab.txt"
        self.catalog_embeddings_path = self.root / "catalog_embeddings.txt"
        self.export_path = self.root / "embeddings_export.txt"
        self.analysis_path = self.root / "analysis.json"

    def checkpoint_path(self, kind: str | None = None) -> Path:
        return self.root / "checkpoints" / f"{kind or self.cfg.strategy.kind}.bin"

    def metrics_path(self, split: str) -> Path:
        return self.root / f"metrics_{split}.json"

    def rankings_path(self, split: str) -> Path:
        return self.root / f"rankings_{split}.jsonl"

    def _need(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise DataError(f"{path} not found; run '{producer}' first")
        return path

    def split(self, name: str) -> list[corpus.Example]:
        return corpus.read_examples(self._need(self.split_dir / f"{name}.jsonl", "preprocess"))

    def catalog(self) -> list[corpus.ItemRecord]:
        return corpus.load_items(self._need(self.catalog_path, "preprocess"))

    def histories(self) -> list[corpus.UserHistory]:
        return corpus.read_histories(self._need(self.histories_path, "preprocess"))

    def vocab(self) -> TokenVocab:
        return TokenVocab.load(self._need(self.vocab_path, "build-vocab"))

    def verbalize_config(self) -> VerbalizeConfig:
        v = self.cfg.verbalize
        return VerbalizeConfig(tuple(v.attributes), v.include_item_id, v.include_user_id)

    def user_index(self, histories) -> dict[str, int]:
        return {u: i for i, u in enumerate(sorted(h.user_id for h in histories))}

    def model_config(self, vocab: TokenVocab, n_items: int, n_users: int) -> ModelConfig:
        m = self.cfg.model
        v = self.cfg.verbalize
        return ModelConfig(
            vocab_size=len(vocab), hidden_dim=m.hidden_dim, num_heads=m.num_heads, ffn_dim=m.ffn_dim,
            encoder_layers=m.encoder_layers, decoder_layers=m.decoder_layers,
            max_session_len=max(v.session_len, v.item_max_len), dropout=m.dropout, id_fusion=m.id_fusion,
            num_item_ids=n_items if m.id_fusion == "embed" else 0,
            num_user_ids=n_users if m.id_fusion == "embed" and v.include_user_id else 0,
            dtype=m.dtype,
        )

    def load_model(self, path: Path | None, vocab: TokenVocab):
        path = Path(path) if path else self.checkpoint_path()
        self._need(path, "train")
        model, meta = load_checkpoint(path)
        if meta.get("vocab") != vocab.fingerprint():
            raise StaleArtifactError(
                f"{path} was trained with vocab {meta.get('vocab')} but {self.vocab_path} is {vocab.fingerprint()}; "
                "retrain or rebuild the vocabulary")
        if model.config.vocab_size != len(vocab):
            raise StaleArtifactError(f"{path}: vocab size {model.config.vocab_size} != {len(vocab)}")
        return model, meta, checkpoint_fingerprint(path)

    def popular_set(self, size: int, basis: str) -> list[str]:
        if basis == "full":
            stream = [i for h in self.histories() for i in h.items]
        else:
            stream = [ex.target for ex in self.split("train")]
        return build_popular_set(stream, size)


def config_echo(cfg: RunConfig) -> dict:
    return {k: v for k, v in flatten(cfg).items() if not k.startswith("paths.")}


# -- commands -------------------------------------------------------------------

def cmd_preprocess(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    for p in (cfg.paths.interactions, cfg.paths.items):
        if not p or not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p!r}")
    records = corpus.ingest_interactions(cfg.paths.interactions)
    items = corpus.load_items(cfg.paths.items)
    raw = len(records)
    pp = cfg.preprocess
    if pp.min_timestamp is not None or pp.max_timestamp is not None:
        lo = pp.min_timestamp if pp.min_timestamp is not None else 0
        hi = pp.max_timestamp if pp.max_timestamp is not None else 2**63 - 1
        records = corpus.date_filter(records, lo, hi)
    records = corpus.k_core_filter(records, pp.min_count)
    if not records:
        raise DataError("no interactions left after filtering")
    histories = corpus.build_histories(records)
    split = corpus.leave_one_out_split(histories)
    corpus.check_split_identity(split, len(records), len(histories))
    catalog = corpus.restrict_catalog(items, records)

    ws.split_dir.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "test"):
        corpus.write_examples(getattr(split, name), ws.split_dir / f"{name}.jsonl")
    corpus.write_histories(histories, ws.histories_path)
    corpus.write_items(catalog, ws.catalog_path)
    stats = corpus.dataset_stats(records, split)
    stats["raw_actions"] = raw
    _write_json(ws.stats_path, stats)
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_build_vocab(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    vc = ws.verbalize_config()
    catalog = {it.item_id: it for it in ws.catalog()}
    # train-visible part of every history: v1 .. v_{T-2}
    texts = [verbalize_history(h.items[:-2], catalog, vc, h.user_id) for h in ws.histories()]
    vocab = build_vocab(texts, cfg.verbalize.vocab_size)
    vocab.save(ws.vocab_path)
    print(f"vocab: {len(vocab)} tokens -> {ws.vocab_path} ({vocab.fingerprint()})")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    strategy = NegativeStrategy(cfg.strategy.kind, cfg.strategy.k, cfg.strategy.popular_set_size,
                                cfg.strategy.hard_pool_size, cfg.strategy.popularity_basis, cfg.strategy.shared_pool)
    if strategy.kind == "hard" and not args.init_checkpoint:
        raise ConfigError("strategy 'hard' mines negatives from a prior checkpoint; pass --init-checkpoint")
    vocab = ws.vocab()
    items = ws.catalog()
    histories = ws.histories()
    vc = ws.verbalize_config()
    table = build_item_table(items, vocab, vc, cfg.verbalize.item_max_len)
    users = ws.user_index(histories)
    data = prepare_training_data(ws.split("train"), histories, {it.item_id: it for it in items}, table, vocab, vc,
                                 cfg.verbalize.sessions, cfg.verbalize.session_len, users)
    init_fp = None
    if args.init_checkpoint:
        model, _, init_fp = ws.load_model(Path(args.init_checkpoint), vocab)
    else:
        model = init_params(ws.model_config(vocab, len(items), len(users)), cfg.seed)

    t = cfg.train
    hard = strategy.kind == "hard"
    tc = TrainConfig(
        batch_size=t.batch_size,
        learning_rate=t.hard_learning_rate if hard else t.learning_rate,
        warmup_proportion=t.hard_warmup_proportion if hard else t.warmup_proportion,
        total_steps=t.total_steps, seed=cfg.seed, grad_clip_norm=t.grad_clip_norm, remine_every=t.remine_every,
    )
    popular = ws.popular_set(strategy.popular_set_size, strategy.popularity_basis) if strategy.kind == "popular" else None
    pools = mine_hard_negatives(model, data, strategy.hard_pool_size) if hard else None

    ckpt = ws.checkpoint_path(strategy.kind)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    result = train(model, data, tc, strategy, popular, pools, log_path=ws.root / f"train_log_{strategy.kind}.jsonl")
    meta = {
        "vocab": vocab.fingerprint(),
        "strategy": strategy.kind,
        "sessions": [cfg.verbalize.sessions, cfg.verbalize.session_len],
        "item_max_len": cfg.verbalize.item_max_len,
        "init": init_fp,
        "steps": tc.total_steps,
        "learning_rate": tc.learning_rate,
        "warmup_proportion": tc.warmup_proportion,
        "seed": cfg.seed,
    }
    fp = save_checkpoint(ckpt, model, meta)
    print(f"trained {tc.total_steps} steps, final loss {result.final_loss:.4f}; checkpoint {ckpt} ({fp})")
    return 0


def _catalog_embeddings(ws: Workspace, args):
    vocab = ws.vocab()
    model, meta, fp = ws.load_model(getattr(args, "checkpoint", None), vocab)
    items = ws.catalog()
    table = build_item_table(items, vocab, ws.verbalize_config(), meta.get("item_max_len", ws.cfg.verbalize.item_max_len))
    return vocab, model, items, encode_catalog(model, table, fp)


def cmd_encode(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    _, _, _, cat = _catalog_embeddings(ws, args)
    write_embeddings(ws.catalog_embeddings_path, cat.item_ids, cat.matrix)
    print(f"encoded {len(cat.item_ids)} items -> {ws.catalog_embeddings_path}")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    vocab, model, items, cat = _catalog_embeddings(ws, args)
    name = cfg.eval.split
    if name not in ("dev", "test"):
        raise ConfigError("eval.split must be 'dev' or 'test'")
    examples = ws.split(name)
    vc = ws.verbalize_config()
    tokens, mask = encode_examples(examples, {it.item_id: it for it in items}, vocab, vc,
                                   cfg.verbalize.sessions, cfg.verbalize.session_len)
    users = ws.user_index(ws.histories())
    uidx = np.array([users.get(ex.user_id, 0) for ex in examples], dtype=np.int64)
    res = evaluate(model, examples, tokens, mask, cat, cfg.eval.ks, uidx, cfg.eval.mask_history,
                   max(cfg.eval.top_k, cfg.analysis.top_k))
    write_report(ws.metrics_path(name), res.report, cat.fingerprint, config_echo(cfg))
    write_rankings(ws.rankings_path(name), res.rankings)
    for key, value in res.report.metrics.items():
        print(f"{key}\t{value:.4f}")
    return 0


def cmd_analyze(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    a = cfg.analysis
    rankings = read_rankings(ws._need(ws.rankings_path(cfg.eval.split), "evaluate"))
    items = ws.catalog()
    vc = ws.verbalize_config()
    texts = {it.item_id: verbalize_item(it, vc) for it in items}
    popular = ws.popular_set(a.popular_set_size, a.popularity_basis)
    report = analysis.analysis_report(ws.split("train"), rankings, [it.item_id for it in items], texts, popular,
                                      a.tail_fraction, a.top_k, cfg.eval.ks)
    _write_json(ws.analysis_path, report)
    tail = report["tail"]
    print(f"tail threshold {tail['threshold']}: {tail['long_tail_items']} long-tail / {tail['head_items']} head items "
          f"(achieved ratio {tail['achieved_ratio']:.3f})")
    print(f"popular ratio {report['popular_ratio']:.3f}  dist-1 {report['dist_1']:.4f}  "
          f"dist-2 {report['dist_2']:.4f}  bleu-4 {report['bleu_4']:.4f}")
    return 0


def cmd_export_embeddings(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    _, _, _, cat = _catalog_embeddings(ws, args)
    popular = ws.popular_set(cfg.analysis.popular_set_size, cfg.analysis.popularity_basis)
    n = analysis.export_embeddings(ws.export_path, cat.item_ids, cat.matrix, popular,
                                   cfg.analysis.export_per_group, cfg.seed)
    print(f"exported {n} embeddings -> {ws.export_path}")
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "encode": cmd_encode,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workdir")
        p.add_argument("--threads", type=int)
        p.add_argument("--strategy", choices=("inbatch", "random", "popular", "hard"))
        p.add_argument("--sessions", help="session geometry NxM, e.g. 2x256")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        if name == "train":
            p.add_argument("--init-checkpoint")
        if name in ("encode", "evaluate", "export-embeddings"):
            p.add_argument("--checkpoint")
        if name == "evaluate":
            p.add_argument("--mask-history", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        set_key(cfg, key.strip(), value)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workdir:
        cfg.paths.workdir = args.workdir
    if args.threads:
        cfg.threads = args.threads
    if args.strategy:
        cfg.strategy.kind = args.strategy
    if args.sessions:
        m = re.fullmatch(r"(\d+)x(\d+)", args.sessions)
        if not m:
            raise ConfigError(f"--sessions expects NxM, got {args.sessions!r}")
        cfg.verbalize.sessions, cfg.verbalize.session_len = int(m[1]), int(m[2])
    if getattr(args, "mask_history", False):
        cfg.eval.mask_history = True
    if cfg.seed is None:
        raise ConfigError("a seed is required (config key 'seed' or --seed)")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        print("# effective config")
        print(dump_config(cfg), end="")
        sys.stdout.flush()
        torch.set_num_threads(max(1, cfg.threads))
        cfg.workdir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
