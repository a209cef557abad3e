"""Autoregressive transformer policy over multimodal token sequences.

Layout of one forward pass::

    embed (text table | image table)
    -> vision blocks (pre)   residual updates gated to image positions
    -> core blocks
    -> vision blocks (post)  gated likewise
    -> final norm -> text head and image head

The head that scores position ``t`` is picked from the class of token
``t + 1`` (image head inside the image span, text head elsewhere).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .codec import CodeGrid, Modality, VocabLayout, modality_mask, resolution_prefix
from .numerics import Adam, GradTape, NumericError, Tensor

CHECKPOINT_MAGIC = b"GGCK"
CHECKPOINT_VERSION = 1
_NEG = -1e30


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 48
    n_heads: int = 4
    n_core_blocks: int = 4
    n_vision_blocks_pre: int = 1
    n_vision_blocks_post: int = 1
    ffn_mult: int = 4
    max_seq_len: int = 48
    predict_eom: bool = False
    rope_base: float = 10000.0
    init_std: float = 0.02
    norm_eps: float = 1e-6
    seed: int = 0
    layout: VocabLayout = field(default_factory=VocabLayout)

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.head_dim % 2:
            raise ValueError("head dim must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def text_head_width(self) -> int:
        return self.layout.total - self.layout.image_vocab_size

    @property
    def image_head_width(self) -> int:
        return self.layout.image_vocab_size + int(self.predict_eom)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        d = dict(d)
        d["layout"] = VocabLayout(**d["layout"])
        return cls(**d)


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    top_k: int = 0
    cfg_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")


# ---------------------------------------------------------------------------
# model


def _block_shapes(cfg: PolicyConfig) -> dict[str, tuple[int, ...]]:
    d, m = cfg.embed_dim, cfg.ffn_mult * cfg.embed_dim
    return {
        "attn_norm": (d,),
        "wq": (d, d),
        "wk": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "ffn_norm": (d,),
        "w1": (d, m),
        "w2": (m, d),
    }


def _block_names(cfg: PolicyConfig) -> dict[str, list[str]]:
    return {
        "pre": [f"vis_pre{i}" for i in range(cfg.n_vision_blocks_pre)],
        "core": [f"core{i}" for i in range(cfg.n_core_blocks)],
        "post": [f"vis_post{i}" for i in range(cfg.n_vision_blocks_post)],
    }


class PolicyModel:
    """Parameters are held in ``self.params`` (name -> Tensor), in a fixed order."""

    def __init__(self, cfg: PolicyConfig, init: str = "normal"):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(cfg.seed)
        d = cfg.embed_dim
        n_layers = cfg.n_core_blocks + cfg.n_vision_blocks_pre + cfg.n_vision_blocks_post
        out_std = cfg.init_std / math.sqrt(2 * max(n_layers, 1))

        def new(name, shape, kind):
            if kind == "one":
                arr = np.ones(shape)
            elif init == "zeros":
                arr = np.zeros(shape)
            else:
                std = out_std if kind == "out" else cfg.init_std
                arr = rng.normal(0.0, std, size=shape)
            self.params[name] = Tensor(arr, name=name)

        new("embed_text", (cfg.text_head_width, d), "w")
        new("embed_image", (cfg.layout.image_vocab_size, d), "w")
        for names in _block_names(cfg).values():
            for b in names:
                for pname, shape in _block_shapes(cfg).items():
                    kind = "one" if pname.endswith("norm") else ("out" if pname in ("wo", "w2") else "w")
                    new(f"{b}.{pname}", shape, kind)
        new("final_norm", (d,), "one")
        new("head_text", (d, cfg.text_head_width), "w")
        new("head_image", (d, cfg.image_head_width), "w")

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ConfigMismatch("parameter names differ from the model's")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ConfigMismatch(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def clone(self) -> "PolicyModel":
        other = PolicyModel.__new__(PolicyModel)
        other.cfg = self.cfg
        other.params = {k: Tensor(p.data.copy(), name=k) for k, p in self.params.items()}
        return other

    def without_vision_blocks(self) -> "PolicyModel":
        """Same weights with every vision-specific block removed."""
        cfg = replace(self.cfg, n_vision_blocks_pre=0, n_vision_blocks_post=0)
        other = PolicyModel.__new__(PolicyModel)
        other.cfg = cfg
        other.params = {k: p for k, p in self.params.items() if not k.startswith("vis_")}
        return other

    # -- checkpoint ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        cfg_bytes = json.dumps(self.cfg.to_dict(), sort_keys=True).encode()
        out = bytearray(CHECKPOINT_MAGIC)
        out += struct.pack("<II", CHECKPOINT_VERSION, len(cfg_bytes)) + cfg_bytes
        out += struct.pack("<I", len(self.params))
        for name, p in self.params.items():
            nb = name.encode()
            out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", p.ndim)
            out += struct.pack(f"<{p.ndim}I", *p.shape)
            out += p.data.astype("<f8").tobytes()
        Path(path).write_bytes(bytes(out))

    @classmethod
    def load(cls, path: str | Path, expect: PolicyConfig | None = None) -> "PolicyModel":
        raw = Path(path).read_bytes()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a policy checkpoint")
        version, n_cfg = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 12
        cfg = PolicyConfig.from_dict(json.loads(raw[off : off + n_cfg]))
        off += n_cfg
        if expect is not None and expect != cfg:
            raise ConfigMismatch("checkpoint config does not match the expected config")
        (n_params,) = struct.unpack_from("<I", raw, off)
        off += 4
        state = {}
        for _ in range(n_params):
            (n_name,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + n_name].decode()
            off += n_name
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            state[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
            off += 8 * count
        model = cls(cfg, init="zeros")
        model.load_state_dict(state)
        return model


# ---------------------------------------------------------------------------
# forward pass


def apply_rope(q, k, positions, base: float = 10000.0) -> tuple[Tensor, Tensor]:
    return nx.rope(q, positions, base), nx.rope(k, positions, base)


def _rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    ms = nx.mean(x * x, axis=-1, keepdims=True)
    return x * nx.rsqrt(ms + eps) * gain


_MASKS: dict[int, np.ndarray] = {}


def _causal_bias(t: int) -> np.ndarray:
    if t not in _MASKS:
        _MASKS[t] = np.triu(np.full((t, t), _NEG), k=1)
    return _MASKS[t]


def _block(model: PolicyModel, name: str, x: Tensor, positions: np.ndarray, gate=None) -> Tensor:
    cfg = model.cfg
    p = {k: model.params[f"{name}.{k}"] for k in _block_shapes(cfg)}
    B, T, d = x.shape
    H, Dh = cfg.n_heads, cfg.head_dim

    h = _rmsnorm(x, p["attn_norm"], cfg.norm_eps)

    def heads(w):
        return nx.transpose(nx.reshape(h @ w, (B, T, H, Dh)), (0, 2, 1, 3))

    q, k = apply_rope(heads(p["wq"]), heads(p["wk"]), positions, cfg.rope_base)
    v = heads(p["wv"])
    scores = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(Dh))
    att = nx.softmax(scores + _causal_bias(T), axis=-1)
    ctx = nx.reshape(nx.transpose(att @ v, (0, 2, 1, 3)), (B, T, d))
    upd = ctx @ p["wo"]
    x = x + (upd if gate is None else upd * gate)

    h = _rmsnorm(x, p["ffn_norm"], cfg.norm_eps)
    upd = nx.gelu(h @ p["w1"]) @ p["w2"]
    return x + (upd if gate is None else upd * gate)


@dataclass
class Logits:
    text: Tensor  # B x T x text_head_width
    image: Tensor  # B x T x image_head_width
    hidden: Tensor  # B x T x d, after the final norm


def forward_logits(model: PolicyModel, ids) -> Logits:
    """Logits for every position of a batch of equal-length sequences ``ids[B, T]``."""
    cfg, layout = model.cfg, model.cfg.layout
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    B, T = ids.shape
    if T > cfg.max_seq_len:
        raise IndexError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    kinds = layout.classify_array(ids)
    is_img = kinds == Modality.IMAGE
    text_rows = np.where(kinds == Modality.SPECIAL, ids - layout.image_vocab_size, ids)
    text_rows = np.where(is_img, 0, text_rows)
    img_rows = np.where(is_img, ids - layout.image_offset, 0)
    img_gate = is_img[..., None].astype(np.float64)

    x = nx.embedding(model.params["embed_text"], text_rows) * (1.0 - img_gate)
    x = x + nx.embedding(model.params["embed_image"], img_rows) * img_gate
    positions = np.arange(T)
    blocks = _block_names(cfg)
    for name in blocks["pre"]:
        x = _block(model, name, x, positions, gate=img_gate)
    for name in blocks["core"]:
        x = _block(model, name, x, positions)
    for name in blocks["post"]:
        x = _block(model, name, x, positions, gate=img_gate)
    h = _rmsnorm(x, model.params["final_norm"], cfg.norm_eps)
    return Logits(h @ model.params["head_text"], h @ model.params["head_image"], h)


def target_heads(layout: VocabLayout, ids, predict_eom: bool) -> tuple[np.ndarray, np.ndarray]:
    """For targets ``ids[..., 1:]``: whether the image head scores them, and the head index."""
    tgt = np.asarray(ids, dtype=np.int64)[..., 1:]
    kinds = layout.classify_array(tgt)
    on_image = kinds == Modality.IMAGE
    if predict_eom:
        on_image = on_image | (tgt == layout.EOM)
    img_idx = np.where(tgt == layout.EOM, layout.image_vocab_size, tgt - layout.image_offset)
    txt_idx = np.where(kinds == Modality.SPECIAL, tgt - layout.image_vocab_size, tgt)
    return on_image, np.where(on_image, img_idx, txt_idx)


def token_logprobs(model: PolicyModel, ids) -> Tensor:
    """log p(ids[:, t] | ids[:, <t]) for t >= 1, as a B x (T-1) tensor."""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    lg = forward_logits(model, ids[:, :-1])
    on_image, idx = target_heads(model.cfg.layout, ids, model.cfg.predict_eom)
    img_lp = nx.pick(nx.log_softmax(lg.image, -1), np.where(on_image, idx, 0))
    if on_image.all():
        return img_lp
    txt_lp = nx.pick(nx.log_softmax(lg.text, -1), np.where(on_image, 0, idx))
    w = on_image.astype(np.float64)
    return img_lp * w + txt_lp * (1.0 - w)


def sequence_logprob(model: PolicyModel, ids, mask) -> tuple[Tensor, Tensor]:
    """Sum of next-token log-probs over masked-in target positions.

    ``mask`` is aligned with ``ids`` (mask[t] selects the token at t); index 0
    has no predictor and is ignored. Returns ``(total[B], per_position[B, T-1])``.
    """
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    per_pos = token_logprobs(model, ids)
    total = nx.sum(per_pos * mask[:, 1:].astype(np.float64), axis=-1)
    return total, per_pos


# ---------------------------------------------------------------------------
# supervised training


def sft_loss(model: PolicyModel, batch: Sequence[tuple[Sequence[int], np.ndarray]]) -> tuple[Tensor, int]:
    """Masked mean NLL over a batch of (ids, mask); sequences may differ in length."""
    by_len: dict[int, list[int]] = {}
    for i, (ids, _) in enumerate(batch):
        by_len.setdefault(len(ids), []).append(i)
    total: Tensor | None = None
    count = 0
    for _, rows in sorted(by_len.items()):
        ids = np.array([batch[i][0] for i in rows], dtype=np.int64)
        mask = np.array([batch[i][1] for i in rows], dtype=bool)
        s, _ = sequence_logprob(model, ids, mask)
        part = nx.sum(s)
        total = part if total is None else total + part
        count += int(mask[:, 1:].sum())
    if count == 0:
        return nx.mul(total, 0.0), 0
    return total * (-1.0 / count), count


def sft_step(model: PolicyModel, opt: Adam, batch, lr: float, batch_id=None) -> float:
    """One Adam step on the masked cross-entropy; returns the pre-step loss."""
    if not batch:
        raise ValueError("empty batch")
    params = model.parameters()
    try:
        with GradTape() as tape:
            tape.watch(params)
            loss, _ = sft_loss(model, batch)
    except NumericError as e:
        raise NumericError(f"non-finite loss in batch {batch_id}: {e}") from e
    grads = tape.gradient(loss, params)
    opt.step(grads, lr)
    return loss.item()


def image_supervision(layout: VocabLayout, ids, predict_eom: bool) -> np.ndarray:
    return modality_mask(layout, ids, "image", include_eom=predict_eom)


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SampleResult:
    grids: list[CodeGrid]
    ids: np.ndarray  # G x T, full sequences including the closing EOM
    logprobs: np.ndarray  # G x (h*w), conditional log-probs of the sampled codes


class DecodeCache:
    """Per-block rotated keys and values for incremental (no-tape) decoding."""

    def __init__(self, model: PolicyModel):
        self.model = model
        self.keys: dict[str, np.ndarray] = {}
        self.values: dict[str, np.ndarray] = {}
        self.length = 0

    def step(self, ids: np.ndarray) -> np.ndarray:
        """Feed ``ids[B, n]`` (continuing the cached prefix); return image logits of the last position."""
        model, cfg = self.model, self.model.cfg
        layout = cfg.layout
        P = {k: p.data for k, p in model.params.items()}
        B, n = ids.shape
        pos = np.arange(self.length, self.length + n)
        if pos[-1] >= cfg.max_seq_len:
            raise IndexError(f"sequence length {pos[-1] + 1} exceeds max_seq_len {cfg.max_seq_len}")
        kinds = layout.classify_array(ids)
        is_img = kinds == Modality.IMAGE
        text_rows = np.where(kinds == Modality.SPECIAL, ids - layout.image_vocab_size, ids)
        x = np.where(
            is_img[..., None],
            P["embed_image"][np.where(is_img, ids - layout.image_offset, 0)],
            P["embed_text"][np.where(is_img, 0, text_rows)],
        )
        gate = is_img[..., None].astype(np.float64)
        cos, sin = nx.rope_angles(pos, cfg.head_dim, cfg.rope_base)
        blocks = _block_names(cfg)
        for kind in ("pre", "core", "post"):
            for name in blocks[kind]:
                x = self._block(P, name, x, cos, sin, gate if kind != "core" else None)
        self.length += n
        h = _np_rmsnorm(x[:, -1, :], P["final_norm"], cfg.norm_eps)
        return h @ P["head_image"]

    def _block(self, P, name, x, cos, sin, gate):
        cfg = self.model.cfg
        B, n, d = x.shape
        H, Dh = cfg.n_heads, cfg.head_dim
        h = _np_rmsnorm(x, P[f"{name}.attn_norm"], cfg.norm_eps)

        def heads(w):
            return (h @ w).reshape(B, n, H, Dh).transpose(0, 2, 1, 3)

        q = nx._rotate(heads(P[f"{name}.wq"]), cos, sin)
        k = nx._rotate(heads(P[f"{name}.wk"]), cos, sin)
        v = heads(P[f"{name}.wv"])
        if name in self.keys:
            k = np.concatenate([self.keys[name], k], axis=2)
            v = np.concatenate([self.values[name], v], axis=2)
        self.keys[name], self.values[name] = k, v
        scores = q @ k.transpose(0, 1, 3, 2) * (1.0 / math.sqrt(Dh))
        total = k.shape[2]
        scores = scores + np.triu(np.full((n, total), _NEG), k=total - n + 1)
        scores = scores - scores.max(axis=-1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(axis=-1, keepdims=True)
        upd = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, d) @ P[f"{name}.wo"]
        x = x + (upd if gate is None else upd * gate)
        h = _np_rmsnorm(x, P[f"{name}.ffn_norm"], cfg.norm_eps)
        upd = _np_gelu(h @ P[f"{name}.w1"]) @ P[f"{name}.w2"]
        return x + (upd if gate is None else upd * gate)


def _np_rmsnorm(x, gain, eps):
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * gain


def _np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(nx._GELU_C * x * (1.0 + 0.044715 * x * x)))


def _mask_eom(model: PolicyModel, z: np.ndarray) -> np.ndarray:
    if model.cfg.predict_eom:
        z = z.copy()
        z[:, -1] = _NEG
    return z


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_grids(
    model: PolicyModel,
    prompt: Sequence[int],
    height: int,
    width: int,
    sampler: SamplerConfig,
    rngs: Sequence[np.random.Generator],
) -> SampleResult:
    """Sample ``len(rngs)`` grids in one batch, each driven by its own generator.

    With ``cfg_scale != 1`` the sampling logits are ``u + s * (c - u)`` where
    ``u`` comes from the same model with the prompt replaced by a single PAD.
    Reported log-probs are always those of the plain conditional model.
    """
    layout = model.cfg.layout
    G = len(rngs)
    prefix = list(prompt) + resolution_prefix(layout, height, width)
    cond = np.tile(np.asarray(prefix, dtype=np.int64), (G, 1))
    n = height * width
    codes = np.zeros((G, n), dtype=np.int64)
    logps = np.zeros((G, n))
    s = sampler.cfg_scale
    cond_cache = DecodeCache(model)
    c_next = _mask_eom(model, cond_cache.step(cond))
    if s != 1.0:
        uncond = np.tile(np.asarray([layout.PAD] + prefix[len(prompt) :], dtype=np.int64), (G, 1))
        uncond_cache = DecodeCache(model)
        u_next = _mask_eom(model, uncond_cache.step(uncond))
    for t in range(n):
        c = c_next
        logps_c = _log_softmax_np(c)
        if s == 1.0:
            z = c
        else:
            u = u_next
            z = u + s * (c - u)
        z = z / sampler.temperature
        if sampler.top_k:
            kth = np.sort(z, axis=-1)[:, -sampler.top_k][:, None]
            z = np.where(z >= kth, z, _NEG)
        probs = np.exp(_log_softmax_np(z))
        cdf = np.cumsum(probs, axis=-1)
        for g in range(G):
            u01 = rngs[g].random()
            pick = int(np.searchsorted(cdf[g], u01 * cdf[g, -1], side="right"))
            pick = min(pick, probs.shape[1] - 1)
            while probs[g, pick] == 0.0:  # never land on a masked entry
                pick -= 1
            codes[g, t] = pick
        logps[:, t] = logps_c[np.arange(G), codes[:, t]]
        if t + 1 == n:
            break
        tok = (codes[:, t] + layout.image_offset)[:, None]
        c_next = _mask_eom(model, cond_cache.step(tok))
        if s != 1.0:
            u_next = _mask_eom(model, uncond_cache.step(tok))
    image_ids = codes + layout.image_offset
    eom = np.full((G, 1), layout.EOM, dtype=np.int64)
    full = np.concatenate([cond, image_ids, eom], axis=1)
    grids = [CodeGrid(height, width, tuple(int(c) for c in row)) for row in codes]
    return SampleResult(grids, full, logps)


def sample_grid(model, prompt, height, width, sampler: SamplerConfig, rng=None):
    """Single-sample convenience wrapper; the RNG defaults to ``sampler.seed``."""
    rng = rng if rng is not None else np.random.default_rng(sampler.seed)
    res = sample_grids(model, prompt, height, width, sampler, [rng])
    return res.grids[0], res.logprobs[0]


def greedy_grid(model: PolicyModel, prompt, height: int, width: int) -> CodeGrid:
    """Explicit argmax decode (reference for the low-temperature limit)."""
    layout = model.cfg.layout
    ids = list(prompt) + resolution_prefix(layout, height, width)
    codes = []
    for _ in range(height * width):
        z = _mask_eom(model, forward_logits(model, np.asarray([ids])).image.data[:, -1, :])[0]
        c = int(np.argmax(z))
        codes.append(c)
        ids.append(layout.image_token(c))
    return CodeGrid(height, width, tuple(codes))
