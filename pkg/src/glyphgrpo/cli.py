"""Command-line entry point: ``glyphgrpo [--config F] [--set k=v] <command> ...``.

Every command writes into its own output directory (``--out``, or a
directory under ``$GLYPHGRPO_OUT``) together with a ``manifest.json``. The
exit code is 0 only when the command's invariant checks all pass.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .numerics import grad_check
from .policy import PolicyConfig, PolicyModel, sft_loss
from .tasks import dataset_bytes, is_heldout, training_sequence
from .vq import GlyphAtlas

log = logging.getLogger("glyphgrpo")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Checks:
    """Collects named invariant checks; any failure makes the exit code non-zero."""

    def __init__(self):
        self.results: dict[str, bool] = {}

    def add(self, name: str, ok) -> None:
        self.results[name] = bool(ok)
        log.info("check %-32s %s", name, "ok" if ok else "FAILED")

    @property
    def passed(self) -> bool:
        return all(self.results.values())


def _out_dir(args, cfg: H.ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    digest = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True, default=str).encode()).hexdigest()[:10]
    return H.output_root() / f"{args.command}-{digest}"


def _finish(out: Path, args, cfg, inputs: dict, outputs: dict, checks: Checks) -> int:
    (out / "checks.json").write_text(json.dumps(checks.results, indent=2, sort_keys=True) + "\n")
    manifest = H.RunManifest(
        command=args.command,
        config=cfg.to_dict(),
        seed=cfg.grpo.seed if args.command == "rl" else cfg.sft.seed,
        code_version=H.code_hash(),
        inputs={k: str(v) for k, v in inputs.items()},
        outputs={k: str(v) for k, v in outputs.items()},
    )
    manifest.write(out)
    return 0 if checks.passed else 1


def _load_model(path, cfg: H.ExperimentConfig) -> PolicyModel:
    return PolicyModel.load(path, expect=cfg.model.policy_config())


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg, out: Path, atlas: GlyphAtlas) -> tuple[dict, dict, Checks]:
    examples = H.build_dataset(cfg, atlas)
    path = out / "dataset.jsonl"
    H.write_dataset(path, examples)
    checks = Checks()
    counts = [sum(len(e.task.target) == L for e in examples) for L in cfg.data.lengths]
    checks.add("bucket_balance", max(counts) - min(counts) <= 1)
    checks.add("no_heldout_prompts", not any(is_heldout(e.task.prompt) for e in examples))
    checks.add("deterministic", dataset_bytes(H.build_dataset(cfg, atlas)) == path.read_bytes())
    return {}, {"dataset": path, "dataset_sha256": _sha256(path)}, checks


def cmd_sft(args, cfg, out: Path, atlas: GlyphAtlas) -> tuple[dict, dict, Checks]:
    examples = H.load_examples_or_generate(cfg, atlas, args.data)
    metrics = H.JsonlWriter(out / "metrics.jsonl")
    res = H.train_sft(cfg, examples, metrics)
    ckpt = out / "sft.ckpt"
    res.model.save(ckpt)
    checks = Checks()
    checks.add("losses_finite", np.all(np.isfinite(res.losses)))
    checks.add("lr_endpoint_zero", cfg.sft.steps < 2 or abs(H.lr_schedule(cfg.sft.steps - 1, cfg.sft.steps, cfg.sft.lr, cfg.sft.warmup)) <= 1e-12)
    checks.add("checkpoint_reloads", _load_model(ckpt, cfg).state_dict().keys() == res.model.state_dict().keys())
    inputs = {"data": args.data} if args.data else {}
    if args.data:
        inputs["data_sha256"] = _sha256(args.data)
    return inputs, {"checkpoint": ckpt, "metrics": out / "metrics.jsonl"}, checks


def cmd_rl(args, cfg, out: Path, atlas: GlyphAtlas) -> tuple[dict, dict, Checks]:
    sft_path = Path(args.sft)
    sft = _load_model(sft_path, cfg)
    metrics = H.JsonlWriter(out / "metrics.jsonl")
    res = H.train_rl(cfg, sft, atlas, metrics, evaluate=not args.no_eval)
    ckpt = out / "rl.ckpt"
    res.model.save(ckpt)
    checks = Checks()
    lines = (out / "metrics.jsonl").read_text().splitlines()
    checks.add("metrics_line_count", len(lines) == cfg.grpo.steps)
    checks.add("clip_fraction_in_unit_interval", all(0.0 <= r["clip_fraction"] <= 1.0 for r in res.reports))
    checks.add("kl_non_negative", all(r["kl"] >= 0.0 for r in res.reports))
    checks.add("rewards_in_unit_interval", all(0.0 <= r["mean_reward"] <= 1.0 for r in res.reports))
    if cfg.grpo.steps == 0:
        checks.add("unchanged_without_steps", ckpt.read_bytes() == _reserialise(sft))
    return {"sft": sft_path, "sft_sha256": _sha256(sft_path)}, {"checkpoint": ckpt, "metrics": out / "metrics.jsonl"}, checks


def _reserialise(model: PolicyModel) -> bytes:
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "m.ckpt"
        model.save(p)
        return p.read_bytes()


def cmd_eval_text(args, cfg, out: Path, atlas: GlyphAtlas) -> tuple[dict, dict, Checks]:
    model = _load_model(args.ckpt, cfg)
    table = H.eval_text_accuracy(model, H.heldout_tasks(cfg), atlas, cfg.eval.samples_per_prompt, cfg.eval.seed)
    path = out / "text_accuracy.json"
    path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    checks = Checks()
    accs = [r["accuracy"] for r in table["per_prompt"]]
    checks.add("scores_in_unit_interval", all(0.0 <= a <= 1.0 for a in accs))
    checks.add("overall_is_prompt_mean", abs(table["overall"] - float(np.mean(accs))) <= 1e-12)
    print(json.dumps({"buckets": table["buckets"], "overall": table["overall"]}, sort_keys=True))
    return {"checkpoint": args.ckpt}, {"table": path}, checks


def cmd_eval_cfg(args, cfg, out: Path, atlas: GlyphAtlas) -> tuple[dict, dict, Checks]:
    model = _load_model(args.ckpt, cfg)
    tasks = H.heldout_tasks(cfg)
    e = cfg.eval
    rows = H.eval_cfg_sweep(model, e.cfg_scales, tasks, atlas, cfg.rewards, e.samples_per_prompt, e.seed)
    path = out / "cfg_sweep.jsonl"
    writer = H.JsonlWriter(path)
    for row in rows:
        writer.write(row)
        print(json.dumps(row, sort_keys=True))
    checks = Checks()
    checks.add("one_row_per_scale", len(rows) == len(e.cfg_scales))
    plain = H.eval_mean_reward(model, tasks, atlas, cfg.rewards, e.samples_per_prompt, e.seed)
    checks.add("scale_one_matches_plain", all(r["mean_reward"] == plain for r in rows if r["cfg_scale"] == 1.0))
    return {"checkpoint": args.ckpt}, {"table": path}, checks


def cmd_bon(args, cfg, out: Path, atlas: GlyphAtlas) -> tuple[dict, dict, Checks]:
    model = _load_model(args.ckpt, cfg)
    tasks = H.heldout_tasks(cfg)
    e = cfg.eval
    ns = sorted({1, *args.n}) if args.n else [1, e.bon_n]
    rows = [{"n": n, "mean_best_reward": H.eval_best_of_n(model, tasks, atlas, cfg.rewards, n, e.seed)} for n in ns]
    path = out / "bon.jsonl"
    writer = H.JsonlWriter(path)
    for row in rows:
        writer.write(row)
        print(json.dumps(row, sort_keys=True))
    checks = Checks()
    checks.add("rewards_in_unit_interval", all(0.0 <= r["mean_best_reward"] <= 1.0 for r in rows))
    return {"checkpoint": args.ckpt}, {"table": path}, checks


def cmd_grad_check(args, cfg, out: Path, atlas: GlyphAtlas) -> tuple[dict, dict, Checks]:
    pcfg = PolicyConfig(embed_dim=8, n_heads=2, n_core_blocks=1, n_vision_blocks_pre=1, n_vision_blocks_post=0, ffn_mult=2, init_std=0.5, seed=cfg.model.seed)
    model = PolicyModel(pcfg)
    ex = H.build_dataset(H.load_config(None, ["data.n=1", "data.lengths=3"]), atlas)[0]
    ids = training_sequence(pcfg.layout, ex)[-12:]
    batch = [(ids, np.ones(len(ids), bool))]
    rep = grad_check(lambda: sft_loss(model, batch)[0], model.parameters(), eps=1e-4, tol=1e-3, max_entries=args.entries, seed=0)
    path = out / "grad_check.json"
    path.write_text(json.dumps({"max_rel_error": rep.max_rel_error, "per_param": rep.per_param}, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"max_rel_error": rep.max_rel_error, "passed": rep.passed}))
    checks = Checks()
    checks.add("gradient_matches_finite_differences", rep.passed)
    return {}, {"report": path}, checks


COMMANDS = {
    "gen-data": cmd_gen_data,
    "sft": cmd_sft,
    "rl": cmd_rl,
    "eval-text": cmd_eval_text,
    "eval-cfg": cmd_eval_cfg,
    "bon": cmd_bon,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glyphgrpo", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--manifest", help="re-run with the config and inputs recorded in a manifest")
    p.add_argument("--out", help=f"output directory (default: under ${H.OUT_ROOT_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="write the synthetic SFT dataset")
    s = sub.add_parser("sft", help="supervised pretraining")
    s.add_argument("--data", help="dataset.jsonl (generated from the config if omitted)")
    r = sub.add_parser("rl", help="GRPO fine-tuning from an SFT checkpoint")
    r.add_argument("--sft", help="SFT checkpoint")
    r.add_argument("--no-eval", action="store_true", help="skip periodic held-out evaluation")
    for name in ("eval-text", "eval-cfg"):
        e = sub.add_parser(name)
        e.add_argument("--ckpt", required=True)
    b = sub.add_parser("bon", help="best-of-N evaluation")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--n", type=int, action="append", help="N values (repeatable)")
    g = sub.add_parser("grad-check", help="finite-difference check of the full model gradient")
    g.add_argument("--entries", type=int, default=6, help="entries checked per parameter tensor")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.manifest:
        m = H.RunManifest.read(args.manifest)
        if m.command != args.command:
            print(f"manifest is for {m.command!r}, not {args.command!r}", file=sys.stderr)
            return 2
        cfg = H.ExperimentConfig.from_dict(m.config)
        if args.command == "rl" and not args.sft:
            args.sft = m.inputs["sft"]
            if _sha256(args.sft) != m.inputs["sft_sha256"]:
                print("SFT checkpoint differs from the one recorded in the manifest", file=sys.stderr)
                return 2
    else:
        try:
            cfg = H.load_config(args.config, args.overrides)
        except (KeyError, ValueError) as e:
            print(f"config error: {e}", file=sys.stderr)
            return 2
    if args.command == "rl" and not args.sft:
        print("rl needs --sft or --manifest", file=sys.stderr)
        return 2
    atlas = GlyphAtlas.default()
    out = _out_dir(args, cfg)
    with H.run_dir(out):
        inputs, outputs, checks = COMMANDS[args.command](args, cfg, out, atlas)
        code = _finish(out, args, cfg, inputs, outputs, checks)
    print(f"{args.command}: {'ok' if code == 0 else 'invariant check failed'} -> {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
