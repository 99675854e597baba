"""Write a synthetic interactions/items pair in the pipeline's input formats."""
import argparse
from pathlib import Path

from textrec.corpus import write_interactions, write_items
from textrec.synthetic import make_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/synthetic")
    ap.add_argument("--users", type=int, default=50)
    ap.add_argument("--items", type=int, default=30)
    ap.add_argument("--min-len", type=int, default=6)
    ap.add_argument("--max-len", type=int, default=9)
    ap.add_argument("--zipf", type=float, default=0.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = make_corpus(args.users, args.items, args.min_len, args.max_len, args.zipf, args.seed)
    write_interactions(sc.records, out / "interactions.tsv")
    write_items(sc.items, out / "items.jsonl")
    print(f"{len(sc.records)} interactions, {len(sc.items)} items -> {out}")


if __name__ == "__main__":
    main()
