"""Print an RL metrics JSONL as a smoothed text table (reward, KL, clip fraction, evals).

    python3 scripts/summarize_metrics.py runs/default/rl/metrics.jsonl [--window 20]
"""

import argparse
import json

import numpy as np


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("metrics")
    p.add_argument("--window", type=int, default=20)
    args = p.parse_args()
    rows = [json.loads(line) for line in open(args.metrics) if line.strip()]
    if not rows:
        print("no steps recorded")
        return
    reward = np.array([r["mean_reward"] for r in rows])
    print(f"{'steps':>11} {'reward':>8} {'kl':>9} {'clip':>6}")
    for start in range(0, len(rows), args.window):
        chunk = rows[start : start + args.window]
        print(
            f"{start:>5}-{start + len(chunk) - 1:<5} {reward[start:start + len(chunk)].mean():8.4f} "
            f"{np.mean([r['kl'] for r in chunk]):9.2e} {np.mean([r['clip_fraction'] for r in chunk]):6.3f}"
        )
    print()
    for r in rows:
        if "eval" in r:
            e = r["eval"]
            text = " ".join(f"{k}={v:.3f}" for k, v in e["heldout_text_accuracy"].items())
            base = " ".join(f"{k}={v:.3f}" for k, v in e.items() if k.startswith("sft_"))
            print(f"step {r['step']:>4}: held-out reward {e['heldout_mean_reward']:.4f}  text {text}  [{base}]")


if __name__ == "__main__":
    main()
