"""End-to-end acceptance checks A1-A8.

A1, A2 and A4 share one full default-config run (SFT then RL), built once
per session. Each check records a single PASS/FAIL line that is printed in
the pytest terminal summary.
"""

import math
import time

import numpy as np
import pytest

from glyphgrpo import cli
from glyphgrpo import harness as H
from glyphgrpo import numerics as nx
from glyphgrpo.codec import CodeGrid, ProtocolError, VocabLayout, embed_grid, extract_grid
from glyphgrpo.grpo import (
    GrpoConfig,
    collect_group,
    compute_advantages,
    group_code_logprobs,
    grpo_loss,
    kl_unbiased,
    policy_gradient_oracle,
)
from glyphgrpo.numerics import GradTape
from glyphgrpo.policy import PolicyConfig, PolicyModel, SamplerConfig, sft_loss
from glyphgrpo.rewards import make_specs, score_grid
from glyphgrpo.tasks import sample_tasks, training_sequence
from glyphgrpo.vq import Codebook, GlyphAtlas, fit_codebook, quantize

ATLAS = GlyphAtlas.default()


def record(log, key, ok, detail):
    log[key] = f"{key} {'PASS' if ok else 'FAIL'}: {detail}"
    return ok


@pytest.fixture(scope="module")
def full_run():
    cfg = H.ExperimentConfig()
    t0 = time.perf_counter()
    sft = H.train_sft(cfg, H.build_dataset(cfg, ATLAS)).model
    t_sft = time.perf_counter() - t0
    t0 = time.perf_counter()
    rl = H.train_rl(cfg, sft, ATLAS)
    t_rl = time.perf_counter() - t0
    held = H.heldout_tasks(cfg)
    e = cfg.eval
    final = rl.reports[-1]["eval"]
    return {
        "cfg": cfg,
        "sft": sft,
        "rl": rl.model,
        "held": held,
        "t_sft": t_sft,
        "t_rl": t_rl,
        "rl_mean": final["heldout_mean_reward"],
        "sft_mean": final["sft_mean_reward"],
        "sft_bon": final[f"sft_bon{e.bon_n}_reward"],
        "rl_text": final["heldout_text_accuracy"],
        "sft_text": H.eval_text_accuracy(sft, held, ATLAS, e.samples_per_prompt, e.seed)["buckets"],
    }


@pytest.mark.slow
def test_a1_rl_beats_sft_best_of_n(full_run, acceptance_log):
    r = full_run
    ok = r["rl_mean"] > r["sft_bon"] and r["rl_mean"] - r["sft_mean"] >= 0.15 and r["cfg"].grpo.steps <= 200 and r["t_sft"] + r["t_rl"] <= 1800
    detail = (
        f"RL held-out reward {r['rl_mean']:.4f} vs SFT BoN16 {r['sft_bon']:.4f} and SFT mean {r['sft_mean']:.4f} "
        f"(gain {r['rl_mean'] - r['sft_mean']:+.4f}, need >= 0.15); {r['cfg'].grpo.steps} steps, "
        f"SFT {r['t_sft']:.0f}s + RL {r['t_rl']:.0f}s"
    )
    assert record(acceptance_log, "A1", ok, detail), detail


@pytest.mark.slow
def test_a2_long_text_accuracy_gain(full_run, acceptance_log):
    before, after = full_run["sft_text"]["long"], full_run["rl_text"]["long"]
    ok = after - before >= 0.25
    detail = f"long-bucket text accuracy {before:.4f} -> {after:.4f} (gain {after - before:+.4f}, need >= 0.25)"
    assert record(acceptance_log, "A2", ok, detail), detail


def test_a3_grpo_correctness(acceptance_log):
    t0 = time.perf_counter()
    model = PolicyModel(PolicyConfig(init_std=0.2, seed=5))
    specs = make_specs()
    groups = []
    for j, task in enumerate(sample_tasks(2, 11, lengths=(4,))):
        rngs = [nx.make_rng(0, j, i) for i in range(16)]
        groups.append(collect_group(model, task, 16, SamplerConfig(), rngs, specs, ATLAS))
    for g, lp in zip(groups, group_code_logprobs(model, groups)):
        g.old_logprobs = g.ref_logprobs = lp.data
    params = model.parameters()
    with GradTape() as tape:
        tape.watch(params)
        loss, _ = grpo_loss(groups, model, GrpoConfig())
    grads = tape.gradient(loss, params)
    oracle = policy_gradient_oracle(model, groups)
    num = math.sqrt(sum(float(np.sum((-g - o) ** 2)) for g, o in zip(grads, oracle)))
    rel = num / math.sqrt(sum(float(np.sum(o**2)) for o in oracle))

    rng = np.random.default_rng(0)
    adv_mean = max(abs(compute_advantages(rng.random(16)).mean()) for _ in range(1000))

    lp, ref = rng.uniform(-30, 0, size=100_000), rng.uniform(-30, 0, size=100_000)
    kl_min = float(kl_unbiased(lp, ref).min())
    p = np.array([0.4, 0.25, 0.15, 0.12, 0.08])
    q = np.full(5, 0.2)
    exact = float(np.sum(p * np.log(p / q)))
    x = np.random.default_rng(1).choice(5, size=100_000, p=p)
    kl_err = abs(kl_unbiased(np.log(p[x]), np.log(q[x])).mean() - exact) / exact
    elapsed = time.perf_counter() - t0

    ok = rel < 1e-6 and adv_mean <= 1e-9 and kl_min >= 0 and kl_err < 0.05 and elapsed < 60
    detail = (
        f"gradient vs policy-gradient oracle rel err {rel:.2e}; max |mean advantage| {adv_mean:.1e}; "
        f"min KL {kl_min:.1e}; KL estimate error {kl_err:.3%}; {elapsed:.1f}s"
    )
    assert record(acceptance_log, "A3", ok, detail), detail


@pytest.mark.slow
def test_a4_cfg_sensitivity(full_run, acceptance_log):
    r, e = full_run, full_run["cfg"].eval
    scales = (1.0, 1.5, 2.0, 3.0)
    rl_rows = H.eval_cfg_sweep(r["rl"], scales, r["held"], ATLAS, r["cfg"].rewards, e.samples_per_prompt, e.seed)
    sft_rows = H.eval_cfg_sweep(r["sft"], scales, r["held"], ATLAS, r["cfg"].rewards, e.samples_per_prompt, e.seed)
    rl_vals = [row["mean_reward"] for row in rl_rows]
    sft_vals = [row["mean_reward"] for row in sft_rows]
    spread = max(rl_vals) - min(rl_vals)
    sft_gap = max(sft_vals) - sft_vals[0]
    ok = spread < 0.05 and sft_gap >= 0.05
    detail = (
        f"RL reward over CFG {scales}: {[round(v, 4) for v in rl_vals]} (spread {spread:.4f}, need < 0.05); "
        f"SFT: {[round(v, 4) for v in sft_vals]} (best minus s=1 {sft_gap:.4f}, need >= 0.05)"
    )
    assert record(acceptance_log, "A4", ok, detail), detail


def test_a5_full_model_gradient_check(acceptance_log):
    t0 = time.perf_counter()
    cfg = PolicyConfig(embed_dim=8, n_heads=2, n_core_blocks=1, n_vision_blocks_pre=1, n_vision_blocks_post=0, ffn_mult=2, init_std=0.5, seed=1)
    model = PolicyModel(cfg)
    ex = H.build_dataset(H.load_config(None, ["data.n=1", "data.lengths=3"]), ATLAS)[0]
    ids = training_sequence(cfg.layout, ex)[-12:]
    rep = nx.grad_check(lambda: sft_loss(model, [(ids, np.ones(12, bool))])[0], model.parameters(), eps=1e-4, tol=1e-3, max_entries=8)
    elapsed = time.perf_counter() - t0
    ok = rep.passed and elapsed < 120
    detail = f"2-block model, {rep.n_checked} entries, max rel err {rep.max_rel_error:.2e} (tol 1e-3), {elapsed:.1f}s"
    assert record(acceptance_log, "A5", ok, detail), detail


def test_a6_codec_protocol(acceptance_log):
    layout = VocabLayout()
    rng = np.random.default_rng(6)
    round_trips = 0
    for _ in range(600):
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        grid = CodeGrid(h, w, tuple(int(c) for c in rng.integers(0, 256, size=h * w)))
        prompt = [int(t) for t in rng.integers(0, 64, size=rng.integers(0, 10))]
        round_trips += extract_grid(layout, embed_grid(layout, prompt, grid)) == grid
    crashes, protocol, valid = 0, 0, 0
    for _ in range(10_000):
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        ids = list(embed_grid(layout, [], CodeGrid(h, w, tuple(int(c) for c in rng.integers(0, 256, size=h * w)))).ids)
        for _ in range(rng.integers(1, 4)):
            i = int(rng.integers(len(ids)))
            kind = rng.integers(3)
            if kind == 0:
                ids[i] = int(rng.integers(-2, layout.total + 2))
            elif kind == 1:
                del ids[i]
            else:
                ids.insert(i, int(rng.integers(0, layout.total)))
            if not ids:
                break
        try:
            extract_grid(layout, ids)
            valid += 1
        except ProtocolError:
            protocol += 1
        except Exception:
            crashes += 1
    ok = round_trips == 600 and crashes == 0
    detail = f"{round_trips}/600 round trips; fuzz 10000 cases: {protocol} protocol errors, {valid} valid parses, {crashes} other exceptions"
    assert record(acceptance_log, "A6", ok, detail), detail


def test_a7_quantizer(acceptance_log):
    rng = np.random.default_rng(7)
    cb = Codebook(rng.normal(size=(64, 6)))
    queries = rng.normal(size=(1000, 6))
    brute = [min(range(cb.K), key=lambda k: (float(np.sum((q - cb.vectors[k]) ** 2)), k)) for q in queries]
    matches = sum(quantize(q, cb) == b for q, b in zip(queries, brute))
    res = fit_codebook(rng.normal(size=(500, 6)), K=24, iters=20, seed=1)
    monotone = all(b <= a for a, b in zip(res.objective, res.objective[1:]))
    ok = matches == 1000 and monotone and len(res.objective) == 20
    detail = f"{matches}/1000 queries equal brute force; k-means objective {res.objective[0]:.2f} -> {res.objective[-1]:.2f} over {len(res.objective)} iterations, monotone={monotone}"
    assert record(acceptance_log, "A7", ok, detail), detail


def test_a8_rl_rerun_is_byte_identical(tmp_path, acceptance_log):
    base = ["--set", "data.n=200", "--set", "sft.steps=10", "--set", "eval.n_prompts=4", "--set", "eval.every=2", "--set", "eval.bon_n=4"]
    assert cli.main(base + ["--out", str(tmp_path / "sft"), "sft"]) == 0
    rl = base + ["--set", "grpo.steps=3", "--set", "grpo.prompts_per_step=4", "--set", "grpo.group_size=8"]
    assert cli.main(rl + ["--out", str(tmp_path / "rl0"), "rl", "--sft", str(tmp_path / "sft" / "sft.ckpt")]) == 0
    manifest = tmp_path / "rl0" / "manifest.json"
    codes = [cli.main(["--manifest", str(manifest), "--out", str(tmp_path / d), "rl"]) for d in ("rl1", "rl2")]
    a, b = ((tmp_path / d / "metrics.jsonl").read_bytes() for d in ("rl1", "rl2"))
    ok = codes == [0, 0] and a == b and len(a.splitlines()) == 3
    detail = f"two reruns from one manifest: exit codes {codes}, metrics {len(a)} bytes, identical={a == b}"
    assert record(acceptance_log, "A8", ok, detail), detail


@pytest.mark.slow
@pytest.mark.parametrize(
    "weights",
    [
        {"ocr": 0.4, "alignment": 0.3, "aesthetic": 0.3},
        {"ocr": 1.0, "alignment": 1.0, "aesthetic": 1.0},
        {"ocr": 0.8, "alignment": 0.1, "aesthetic": 0.1},
        {"ocr": 0.1, "alignment": 0.45, "aesthetic": 0.45},
    ],
    ids=["default", "uniform", "ocr-heavy", "ocr-light"],
)
def test_rl_gain_survives_reweighting(full_run, weights):
    # same samples (fixed seeds) rescored under other weightings of the same components
    r, e = full_run, full_run["cfg"].eval
    rl = H.eval_mean_reward(r["rl"], r["held"], ATLAS, weights, e.samples_per_prompt, e.seed)
    sft = H.eval_mean_reward(r["sft"], r["held"], ATLAS, weights, e.samples_per_prompt, e.seed)
    assert rl > sft


def test_noise_rate_sweep_sets_headroom():
    # dataset reward falls monotonically with the corruption rate, leaving room for RL above SFT
    specs = make_specs()
    means = []
    for rate in (0.0, 0.1, 0.15, 0.3):
        cfg = H.load_config(None, ["data.n=300", f"data.noise_rate={rate}"])
        data = H.build_dataset(cfg, ATLAS)
        means.append(np.mean([score_grid(specs, ex.grid(), ex.task.meta(ATLAS), ATLAS).total for ex in data]))
    assert means[0] == 1.0
    assert all(b < a for a, b in zip(means, means[1:]))
    assert means[-1] < 0.85
