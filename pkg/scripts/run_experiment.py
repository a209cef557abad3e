"""Full pipeline: dataset -> SFT -> RL -> CFG / text-accuracy / best-of-N evaluations.

    python3 scripts/run_experiment.py --out runs/default [--config configs/default.ini] [--set k=v ...]

Writes one sub-directory per stage (each with its own manifest) plus a
``summary.json`` comparing the SFT and RL checkpoints.
"""

import argparse
import json
import sys
from pathlib import Path

from glyphgrpo import cli


def stage(common, out: Path, name: str, *args) -> Path:
    target = out / name
    code = cli.main([*common, "--out", str(target), *args])
    if code != 0:
        sys.exit(f"stage {name} failed with exit code {code}")
    return target


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", dest="overrides", action="append", default=[])
    args = p.parse_args()
    out = Path(args.out)
    common = (["--config", args.config] if args.config else []) + [a for kv in args.overrides for a in ("--set", kv)]

    data = stage(common, out, "data", "gen-data")
    sft = stage(common, out, "sft", "sft", "--data", str(data / "dataset.jsonl"))
    rl = stage(common, out, "rl", "rl", "--sft", str(sft / "sft.ckpt"))
    summary = {}
    for tag, ckpt in (("sft", sft / "sft.ckpt"), ("rl", rl / "rl.ckpt")):
        cfg_dir = stage(common, out, f"cfg_{tag}", "eval-cfg", "--ckpt", str(ckpt))
        text_dir = stage(common, out, f"text_{tag}", "eval-text", "--ckpt", str(ckpt))
        bon_dir = stage(common, out, f"bon_{tag}", "bon", "--ckpt", str(ckpt))
        summary[tag] = {
            "cfg_sweep": [json.loads(x) for x in (cfg_dir / "cfg_sweep.jsonl").read_text().splitlines()],
            "text_accuracy": json.loads((text_dir / "text_accuracy.json").read_text())["buckets"],
            "best_of_n": [json.loads(x) for x in (bon_dir / "bon.jsonl").read_text().splitlines()],
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
