import math
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from oracles import softmax_ce, synthetic_setup
from textrec.encoder import ModelConfig, encode_item, forward_loss, init_params
from textrec.ranker import encode_catalog
from textrec.training import (NegativeStrategy, NumericError, TrainConfig, assemble_batch, build_popular_set,
                              example_rng, hard_stage_config, lr_schedule, mine_hard_negatives,
                              sample_for_example, sample_popular_negatives, sample_random_negatives, train)


@pytest.fixture(scope="module")
def setup():
    return synthetic_setup(n_users=30, n_items=20, m=16, item_len=10)


def small_model(vocab_size, seed=0, m=16, dtype="float64"):
    cfg = ModelConfig(vocab_size=vocab_size, hidden_dim=16, num_heads=2, ffn_dim=32, encoder_layers=1,
                      decoder_layers=1, max_session_len=m, dtype=dtype)
    return init_params(cfg, seed)


def test_strategy_validation():
    assert NegativeStrategy("inbatch_only").kind == "inbatch"
    assert NegativeStrategy("inbatch", k=9).sampled == 0
    with pytest.raises(ValueError):
        NegativeStrategy("easy")
    with pytest.raises(ValueError):
        NegativeStrategy("popular", k=10, popular_set_size=5)


def test_random_negatives_exclude():
    catalog = [str(i) for i in range(20)]
    rng = np.random.default_rng(0)
    for _ in range(200):
        negs = sample_random_negatives(catalog, {"0", "1", "2"}, 9, rng)
        assert len(set(negs)) == 9 and not set(negs) & {"0", "1", "2"}


def test_random_negatives_too_few():
    with pytest.raises(ValueError):
        sample_random_negatives(["a", "b", "c"], {"a"}, 3, np.random.default_rng(0))


def test_random_negatives_uniform():
    catalog = [str(i) for i in range(20)]
    excl = {"0", "1", "2", "3", "4"}
    rng = np.random.default_rng(1)
    draws, k = 100_000, 3
    counts = Counter()
    for _ in range(draws // k):
        counts.update(sample_random_negatives(catalog, excl, k, rng))
    p = k / 15
    trials = draws // k
    sigma = math.sqrt(trials * p * (1 - p))
    for item in catalog[5:]:
        assert abs(counts[item] - trials * p) <= 3 * sigma
    assert not set(counts) & excl


def test_popular_set_ranking_and_ties():
    stream = ["b"] * 3 + ["a"] * 3 + ["c"] * 5 + ["d"]
    assert build_popular_set(stream, 3) == ["c", "a", "b"]
    assert build_popular_set(stream, 500) == ["c", "a", "b", "d"]


def test_popular_negatives_stay_in_set():
    popular = [str(i) for i in range(10)]
    rng = np.random.default_rng(0)
    for _ in range(100):
        negs = sample_popular_negatives(popular, {"3"}, 5, rng)
        assert set(negs) <= set(popular) - {"3"}


def test_example_rng_independent_of_order():
    a = example_rng(1, 0, 5).integers(0, 1 << 30, 4)
    example_rng(1, 0, 4).integers(0, 10)
    assert np.array_equal(a, example_rng(1, 0, 5).integers(0, 1 << 30, 4))
    assert not np.array_equal(a, example_rng(1, 1, 5).integers(0, 1 << 30, 4))


def test_batch_arithmetic_no_collisions():
    targets = [f"t{i}" for i in range(8)]
    negatives = [[f"n{i}_{j}" for j in range(9)] for i in range(8)]
    batch = assemble_batch(targets, negatives)
    assert batch.size == 80
    assert batch.candidates[:8] == targets and batch.positives == list(range(8))


def test_batch_dedup_with_collisions():
    batch = assemble_batch(["a", "b", "a"], [["c", "b"], ["c", "d"], ["e", "d"]])
    assert batch.candidates == ["a", "b", "c", "d", "e"]
    assert batch.positives == [0, 1, 0]


def test_unshared_pool_mask():
    batch = assemble_batch(["a", "b"], [["c"], ["d"]], shared=False)
    assert batch.mask.tolist() == [[True, True, True, False], [True, True, False, True]]


@given(st.lists(st.tuples(st.integers(0, 30), st.lists(st.integers(0, 30), max_size=5)), min_size=1, max_size=8))
def test_batch_candidate_set_is_union(rows):
    targets = [str(t) for t, _ in rows]
    negs = [[str(n) for n in ns] for _, ns in rows]
    universe = set(targets) | {n for ns in negs for n in ns}
    if len(universe) < 2:
        with pytest.raises(ValueError):
            assemble_batch(targets, negs)
        return
    batch = assemble_batch(targets, negs)
    assert sorted(batch.candidates) == sorted(universe)
    assert [batch.candidates[p] for p in batch.positives] == targets


def test_dedup_loss_matches_scalar_oracle(setup):
    data, vocab = setup["data"], setup["vocab"]
    model = small_model(len(vocab))
    rows = [0, 1, 2]
    strategy = NegativeStrategy("random", k=4)
    negs = [sample_for_example(strategy, r, data, example_rng(0, 0, r), None, None) for r in rows]
    batch = assemble_batch([data.examples[r].target for r in rows], negs)
    table = data.items
    cand_rows = [table.index[c] for c in batch.candidates]
    out = forward_loss(model, torch.as_tensor(data.user_tokens[rows]), torch.as_tensor(data.user_mask[rows]),
                       torch.as_tensor(table.tokens[cand_rows])[:, None], torch.as_tensor(table.mask[cand_rows])[:, None],
                       batch.positives)
    # oracle: embed every unique candidate on its own and score it against each user
    item_vecs = {c: encode_item(model, table.tokens[table.index[c]][table.mask[table.index[c]]].tolist()).detach().numpy()
                 for c in set(batch.candidates)}
    users = model(torch.as_tensor(data.user_tokens[rows]), torch.as_tensor(data.user_mask[rows])).detach().numpy()
    total = 0.0
    for b, r in enumerate(rows):
        scores = [float(users[b] @ item_vecs[c]) for c in batch.candidates]
        total += softmax_ce(scores, batch.candidates.index(data.examples[r].target))
    assert out.loss.item() == pytest.approx(total / len(rows), abs=1e-10)


def test_sampled_negatives_respect_history(setup):
    data = setup["data"]
    popular = build_popular_set([r.item_id for r in setup["records"]], 10)
    for kind in ("random", "popular"):
        strategy = NegativeStrategy(kind, k=3, popular_set_size=10)
        for i in range(len(data.examples)):
            negs = sample_for_example(strategy, i, data, example_rng(0, 0, i), popular, None)
            assert not set(negs) & data.exclusions[i]


def test_exclusions_cover_full_history(setup):
    data = setup["data"]
    hist = {h.user_id: set(h.items) for h in setup["histories"]}
    for ex, excl in zip(data.examples, data.exclusions):
        assert excl == hist[ex.user_id] | {ex.target}


def test_hard_pool_matches_brute_force(setup):
    data, vocab = setup["data"], setup["vocab"]
    model = small_model(len(vocab), seed=4)
    pools = mine_hard_negatives(model, data, pool_size=5)
    catalog = encode_catalog(model, data.items)
    users = model(torch.as_tensor(data.user_tokens), torch.as_tensor(data.user_mask)).detach().numpy()
    for i in range(len(data.examples)):
        scored = [(-float(users[i] @ catalog.matrix[j]), item) for j, item in enumerate(catalog.item_ids)
                  if item not in data.exclusions[i]]
        assert pools[i] == [item for _, item in sorted(scored)[:5]]


def test_lr_schedule_values():
    assert lr_schedule(0, 100, 1.0, 0.1) == 0.0
    assert lr_schedule(5, 100, 1.0, 0.1) == 0.5
    assert lr_schedule(10, 100, 1.0, 0.1) == 1.0
    assert lr_schedule(55, 100, 1.0, 0.1) == 0.5
    assert lr_schedule(100, 100, 1.0, 0.1) == 0.0
    assert lr_schedule(0, 100, 2.0, 0.0) == 2.0
    with pytest.raises(ValueError):
        lr_schedule(101, 100, 1.0, 0.1)


def test_hard_stage_config():
    cfg = hard_stage_config(TrainConfig(learning_rate=1e-3, warmup_proportion=0.2))
    assert cfg.learning_rate == 5e-5 and cfg.warmup_proportion == 0.0


def test_training_is_deterministic(setup, tmp_path):
    data, vocab = setup["data"], setup["vocab"]
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, total_steps=15, seed=3)
    states, logs = [], []
    for run in range(2):
        model = small_model(len(vocab), seed=1)
        train(model, data, cfg, NegativeStrategy("random", k=3), log_path=tmp_path / f"log{run}.jsonl")
        states.append(model.state_dict())
        logs.append((tmp_path / f"log{run}.jsonl").read_bytes())
    assert logs[0] == logs[1]
    for k in states[0]:
        assert torch.equal(states[0][k], states[1][k])


def test_single_example_overfits(setup):
    data, vocab = setup["data"], setup["vocab"]
    from textrec.training import TrainingData
    one = TrainingData(data.examples[:1], data.user_tokens[:1], data.user_mask[:1], data.items, data.exclusions[:1])
    model = small_model(len(vocab), seed=0, dtype="float32")
    res = train(model, one, TrainConfig(batch_size=1, learning_rate=3e-3, warmup_proportion=0.0, total_steps=500),
                NegativeStrategy("random", k=5))
    assert res.final_loss < 0.01 or min(r["loss"] for r in res.log[-20:]) < 0.01


def test_loss_trends_down(setup):
    data, vocab = setup["data"], setup["vocab"]
    model = small_model(len(vocab), seed=0, dtype="float32")
    res = train(model, data, TrainConfig(batch_size=8, learning_rate=2e-3, total_steps=300),
                NegativeStrategy("random", k=5))
    windows = [np.mean([r["loss"] for r in res.log[s:s + 50]]) for s in range(0, 300, 50)]
    assert windows[-1] < windows[0]
    assert all(later < windows[0] for later in windows[1:])


def test_nan_loss_raises(setup):
    data, vocab = setup["data"], setup["vocab"]
    model = small_model(len(vocab))
    with torch.no_grad():
        model.decoder_norm.weight.fill_(float("nan"))
    with pytest.raises(NumericError):
        train(model, data, TrainConfig(batch_size=2, total_steps=3), NegativeStrategy("random", k=2))


def test_strategy_prerequisites(setup):
    data, vocab = setup["data"], setup["vocab"]
    model = small_model(len(vocab))
    with pytest.raises(ValueError):
        train(model, data, TrainConfig(total_steps=1), NegativeStrategy("popular", k=2))
    with pytest.raises(ValueError):
        train(model, data, TrainConfig(total_steps=1), NegativeStrategy("hard", k=2))


def test_hard_and_inbatch_training_run(setup):
    data, vocab = setup["data"], setup["vocab"]
    model = small_model(len(vocab))
    pools = mine_hard_negatives(model, data, pool_size=4)
    res = train(model, data, TrainConfig(batch_size=4, total_steps=5, remine_every=2), NegativeStrategy("hard", k=2, hard_pool_size=4),
                hard_pools=pools)
    assert len(res.log) == 5
    res = train(model, data, TrainConfig(batch_size=4, total_steps=5), NegativeStrategy("inbatch"))
    assert math.isfinite(res.final_loss)
