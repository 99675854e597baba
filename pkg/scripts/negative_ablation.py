"""Compare negative-sampling strategies on a synthetic corpus.

Trains one model per strategy from the same initialisation and reports
full-ranking test metrics. The hard strategy starts from the in-batch model,
mirroring the two-stage recipe.
"""
import argparse
import json

import torch

from textrec import corpus as C
from textrec import verbalize as V
from textrec.encoder import ModelConfig, init_params
from textrec.ranker import encode_catalog, evaluate
from textrec.synthetic import make_corpus
from textrec.training import (NegativeStrategy, TrainConfig, build_popular_set, encode_examples, hard_stage_config,
                              mine_hard_negatives, prepare_training_data, train)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--users", type=int, default=200)
    ap.add_argument("--items", type=int, default=60)
    ap.add_argument("--zipf", type=float, default=0.8)
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--attributes", default="title,pairs")
    args = ap.parse_args()
    torch.set_num_threads(1)

    sc = make_corpus(args.users, args.items, zipf=args.zipf, seed=args.seed)
    recs = C.k_core_filter(sc.records, 5)
    hist = C.build_histories(recs)
    split = C.leave_one_out_split(hist)
    items = C.restrict_catalog(sc.items, recs)
    cat = {i.item_id: i for i in items}
    vc = V.VerbalizeConfig(tuple(args.attributes.split(",")))
    vocab = V.build_vocab([V.verbalize_history(h.items[:-2], cat, vc) for h in hist], 5000)
    n, m = 2, 64
    table = V.build_item_table(items, vocab, vc, 16)
    data = prepare_training_data(split.train, hist, cat, table, vocab, vc, n, m)
    test_tokens, test_mask = encode_examples(split.test, cat, vocab, vc, n, m)
    popular = build_popular_set([r.item_id for r in recs], min(500, len(items) // 2))
    cfg = ModelConfig(vocab_size=len(vocab), hidden_dim=32, num_heads=4, ffn_dim=64, encoder_layers=2,
                      decoder_layers=1, max_session_len=m)
    base = TrainConfig(batch_size=8, learning_rate=1e-3, total_steps=args.steps, seed=args.seed)

    def score(model):
        res = evaluate(model, split.test, test_tokens, test_mask, encode_catalog(model, table), ks=(10, 20))
        return {k: round(v, 4) for k, v in res.report.metrics.items() if k.startswith(("Recall", "NDCG"))}

    results = {}
    inbatch_model = None
    for kind in ("inbatch", "random", "popular"):
        model = init_params(cfg, args.seed)
        train(model, data, base, NegativeStrategy(kind, k=9, popular_set_size=len(popular)), popular=popular)
        results[kind] = score(model)
        if kind == "inbatch":
            inbatch_model = model
    pools = mine_hard_negatives(inbatch_model, data, pool_size=min(100, len(items) // 2))
    hard_cfg = hard_stage_config(base)
    train(inbatch_model, data, hard_cfg, NegativeStrategy("hard", k=9, hard_pool_size=len(pools[0])), hard_pools=pools)
    results["inbatch+hard"] = score(inbatch_model)
    print(json.dumps({"train": len(split.train), "test": len(split.test), "items": len(items), "results": results},
                     indent=2))


if __name__ == "__main__":
    main()
