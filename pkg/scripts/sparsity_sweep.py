"""Attention cost of session-split encoding vs one dense pass, over session geometries.

For each (n, m) with n*m fixed, prints self-attention multiply-accumulates,
peak score-matrix size, and wall time for one forward pass of a random history.
"""
import argparse
import time

import numpy as np
import torch

from textrec.encoder import ModelConfig, count_ops, init_params


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--total", type=int, default=512, help="history length n*m in tokens")
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = ModelConfig(vocab_size=1000, hidden_dim=args.hidden, num_heads=4, ffn_dim=2 * args.hidden,
                      encoder_layers=args.layers, max_session_len=args.total)
    model = init_params(cfg, args.seed).eval()
    rng = np.random.default_rng(args.seed)
    tokens = torch.as_tensor(rng.integers(3, 1000, size=(1, args.total)))
    mask = torch.ones_like(tokens, dtype=torch.bool)

    print(f"{'geometry':>10} {'self MACs':>14} {'vs dense':>9} {'peak scores':>12} {'ms':>8}")
    with torch.no_grad(), count_ops(model) as dense:
        t0 = time.perf_counter()
        model.encode_dense(tokens, mask)
        dense_ms = 1000 * (time.perf_counter() - t0)
    print(f"{'dense':>10} {dense.self_attention_macs:>14,} {1.0:>9.3f} {dense.peak_score_elements:>12,} {dense_ms:>8.1f}")
    n = 1
    while n <= args.total:
        m = args.total // n
        with torch.no_grad(), count_ops(model) as c:
            t0 = time.perf_counter()
            model.encode_sessions(tokens.view(1, n, m), mask.view(1, n, m))
            ms = 1000 * (time.perf_counter() - t0)
        ratio = c.self_attention_macs / dense.self_attention_macs
        print(f"{f'{n}x{m}':>10} {c.self_attention_macs:>14,} {ratio:>9.3f} {c.peak_score_elements:>12,} {ms:>8.1f}")
        n *= 2


if __name__ == "__main__":
    main()
