"""Sweep the SFT corruption rate and report what headroom it leaves for RL.

    python3 scripts/noise_sweep.py --rates 0.0 0.15 0.3 [--set sft.steps=800]

For every rate: train SFT, then report held-out mean reward, text accuracy by
bucket, best-of-N reward and the CFG s=3 reward. Output goes to stdout as JSONL.
"""

import argparse
import json

from glyphgrpo import harness as H
from glyphgrpo.vq import GlyphAtlas


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rates", type=float, nargs="+", default=[0.0, 0.15, 0.3])
    p.add_argument("--config")
    p.add_argument("--set", dest="overrides", action="append", default=[])
    args = p.parse_args()
    atlas = GlyphAtlas.default()
    for rate in args.rates:
        cfg = H.load_config(args.config, [*args.overrides, f"data.noise_rate={rate}"])
        model = H.train_sft(cfg, H.build_dataset(cfg, atlas)).model
        held, e = H.heldout_tasks(cfg), cfg.eval
        row = {
            "noise_rate": rate,
            "mean_reward": H.eval_mean_reward(model, held, atlas, cfg.rewards, e.samples_per_prompt, e.seed),
            "cfg3_reward": H.eval_mean_reward(model, held, atlas, cfg.rewards, e.samples_per_prompt, e.seed, 3.0),
            "text_accuracy": H.eval_text_accuracy(model, held, atlas, e.samples_per_prompt, e.seed)["buckets"],
            f"bon{e.bon_n}_reward": H.eval_best_of_n(model, held, atlas, cfg.rewards, e.bon_n, e.seed),
        }
        print(json.dumps(row, sort_keys=True), flush=True)


if __name__ == "__main__":
    main()
