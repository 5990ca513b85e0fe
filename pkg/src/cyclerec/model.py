"""Self-attentive next-item model: forward pass, exact backward pass, Adam.

Everything runs in float64 numpy. Batched forwards left-pad prefixes; the
causal mask combined with a key-validity mask guarantees a padded slot can
never influence a real position, so per-example features are independent
of batch composition. Gradients are hand-derived reverse-mode and checked
against central finite differences in the test suite.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import TrainingExample
from .losses import LossBreakdown, ce_from_logits, kd_from_logits

LN_EPS = 1e-8
MASK_FILL = -1e9
NEW_ROW_SCALE = 0.01


class DivergenceError(RuntimeError):
    """Raised when a training loss turns non-finite."""


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    block_count: int = 2
    attention_heads: int = 1
    max_seq_len: int = 50
    dropout_rate: float = 0.0
    seed: int = 0
    dtype: str = "float32"  # training precision; oracle checks use float64

    def __post_init__(self) -> None:
        if min(self.embed_dim, self.block_count, self.attention_heads, self.max_seq_len) < 1:
            raise ValueError("model config: all sizes must be positive")
        if self.embed_dim % self.attention_heads:
            raise ValueError("model config: embed_dim must be divisible by attention_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("model config: dropout_rate must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("model config: dtype must be float32 or float64")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)


@dataclass
class ModelState:
    """All learnable parameters plus Adam moments and the step counter."""

    config: ModelConfig
    item_count: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int = 0

    def copy(self) -> "ModelState":
        return ModelState(
            config=self.config,
            item_count=self.item_count,
            params={k: v.copy() for k, v in self.params.items()},
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            step=self.step,
        )


def _param_shapes(cfg: ModelConfig, item_count: int) -> dict[str, tuple[int, ...]]:
    d = cfg.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "item_emb": (item_count, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for b in range(cfg.block_count):
        p = f"blocks.{b}."
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + w] = (d, d)
        for bias in ("bq", "bk", "bv", "bo"):
            shapes[p + "attn." + bias] = (d,)
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "ff.w1"] = (d, d)
        shapes[p + "ff.b1"] = (d,)
        shapes[p + "ff.w2"] = (d, d)
        shapes[p + "ff.b2"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
    return shapes


def _init_tensor(
    name: str, shape: tuple[int, ...], d: int, rng: np.random.Generator, dtype: np.dtype
) -> np.ndarray:
    if name.endswith("ln1.g") or name.endswith("ln2.g"):
        return np.ones(shape, dtype=dtype)
    if len(shape) == 1:
        return np.zeros(shape, dtype=dtype)
    if name in ("item_emb", "pos_emb"):
        bound = 1.0 / math.sqrt(d)
        return rng.uniform(-bound, bound, shape).astype(dtype)
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))  # Glorot uniform
    return rng.uniform(-bound, bound, shape).astype(dtype)


def init_model(cfg: ModelConfig, item_count: int, seed: int | None = None) -> ModelState:
    if item_count < 1:
        raise ValueError("init_model: item_count must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed if seed is None else seed]))
    shapes = _param_shapes(cfg, item_count)
    dt = cfg.np_dtype
    params = {name: _init_tensor(name, shape, cfg.embed_dim, rng, dt) for name, shape in shapes.items()}
    zeros = lambda: {name: np.zeros(shape, dtype=dt) for name, shape in shapes.items()}
    return ModelState(cfg, item_count, params, zeros(), zeros(), step=0)


def grow_vocabulary(state: ModelState, new_item_count: int, seed: int = 0) -> ModelState:
    """Append embedding rows for new items; existing rows stay bit-identical.

    New rows use the embedding init distribution scaled down so old-item
    softmax mass is roughly preserved at the growth boundary.
    """
    if new_item_count < state.item_count:
        raise ValueError("grow_vocabulary: cannot shrink the vocabulary")
    extra = new_item_count - state.item_count
    if extra == 0:
        return state
    d = state.config.embed_dim
    dt = state.config.np_dtype
    bound = 1.0 / math.sqrt(d)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    rows = (rng.uniform(-bound, bound, (extra, d)) * NEW_ROW_SCALE).astype(dt)
    zeros = np.zeros((extra, d), dtype=dt)
    state.params["item_emb"] = np.concatenate([state.params["item_emb"], rows])
    state.adam_m["item_emb"] = np.concatenate([state.adam_m["item_emb"], zeros])
    state.adam_v["item_emb"] = np.concatenate([state.adam_v["item_emb"], zeros.copy()])
    state.item_count = new_item_count
    return state


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax of a 1-D logit vector."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax: non-finite logits")
    e = np.exp(z - z.max())
    return e / e.sum()


def _softmax_last(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _pad_batch(prefixes: Sequence[Sequence[int]], max_seq_len: int):
    trimmed = [p[-max_seq_len:] if len(p) > max_seq_len else p for p in prefixes]
    lengths = [len(p) for p in trimmed]
    if min(lengths) < 1:
        raise ValueError("empty prefix")
    L = max(lengths)
    B = len(trimmed)
    ids = np.zeros((B, L), dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    pos = np.zeros((B, L), dtype=np.int64)
    for r, p in enumerate(trimmed):
        pad = L - len(p)
        ids[r, pad:] = p
        valid[r, pad:] = True
        pos[r, pad:] = np.arange(len(p))
    return ids, valid, pos


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    B, L, D = x.shape
    return x.reshape(B, L, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


# Reductions below go through matmuls with one-vectors: BLAS handles the
# strided last-axis sums far faster than numpy's reduce on these shapes.


def _col_sum(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(-1, x.shape[-1])
    return np.ones(flat.shape[0], dtype=flat.dtype) @ flat


def _ln_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    d = x.shape[-1]
    mean_vec = np.full(d, 1.0 / d, dtype=x.dtype)
    mu = x @ mean_vec
    xc = x - mu[..., None]
    var = (xc * xc) @ mean_vec
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = np.multiply(xc, inv[..., None], out=xc)
    y = np.multiply(xhat, g)
    np.add(y, b, out=y)
    return y, (xhat, inv)


def _ln_backward(dy: np.ndarray, g: np.ndarray, cache):
    xhat, inv = cache
    d = dy.shape[-1]
    mean_vec = np.full(d, 1.0 / d, dtype=dy.dtype)
    dg = _col_sum(dy * xhat)
    db = _col_sum(dy)
    dxhat = dy * g
    m1 = dxhat @ mean_vec
    m2 = (dxhat * xhat) @ mean_vec
    dx = inv[..., None] * (dxhat - m1[..., None] - xhat * m2[..., None])
    return dx, dg, db


def _encode_batch(
    state: ModelState,
    prefixes: Sequence[Sequence[int]],
    train_mode: bool = False,
    dropout_seed: int = 0,
    need_cache: bool = False,
):
    """Run the encoder; returns per-position features and an optional cache."""
    cfg = state.config
    P = state.params
    ids, valid, pos = _pad_batch(prefixes, cfg.max_seq_len)
    if ids.max() >= state.item_count:
        raise ValueError("prefix item index out of range")
    B, L = ids.shape
    H = cfg.attention_heads
    dt = cfg.np_dtype
    scale = 1.0 / math.sqrt(cfg.embed_dim // H)

    x = (P["item_emb"][ids] + P["pos_emb"][pos]) * valid[:, :, None]
    allowed = (np.tril(np.ones((L, L), dtype=bool))[None, :, :] & valid[:, None, :])[:, None, :, :]
    fill = dt.type(MASK_FILL)

    use_dropout = train_mode and cfg.dropout_rate > 0.0
    rng = np.random.default_rng(np.random.SeedSequence([dropout_seed])) if use_dropout else None
    keep = 1.0 - cfg.dropout_rate

    def drop_mask(shape):
        return (rng.random(shape, dtype=dt) >= cfg.dropout_rate).astype(dt) / keep

    blocks = []
    for b in range(cfg.block_count):
        p = f"blocks.{b}."
        q = x @ P[p + "attn.wq"] + P[p + "attn.bq"]
        k = x @ P[p + "attn.wk"] + P[p + "attn.bk"]
        v = x @ P[p + "attn.wv"] + P[p + "attn.bv"]
        qh, kh, vh = (_split_heads(a, H) for a in (q, k, v))
        scores = qh @ kh.transpose(0, 1, 3, 2)
        scores = np.where(allowed, scores, fill)
        attn = _softmax_last(scores * scale)
        ctx = _merge_heads(attn @ vh)
        o = (ctx @ P[p + "attn.wo"] + P[p + "attn.bo"]) * valid[:, :, None]
        mask1 = drop_mask(o.shape) if rng is not None else None
        od = o * mask1 if mask1 is not None else o
        r1 = x + od
        x1, ln1c = _ln_forward(r1, P[p + "ln1.g"], P[p + "ln1.b"])
        hpre = x1 @ P[p + "ff.w1"] + P[p + "ff.b1"]
        h = np.maximum(hpre, 0.0)
        f = h @ P[p + "ff.w2"] + P[p + "ff.b2"]
        mask2 = drop_mask(f.shape) if rng is not None else None
        fd = f * mask2 if mask2 is not None else f
        x2, ln2c = _ln_forward(x1 + fd, P[p + "ln2.g"], P[p + "ln2.b"])
        if need_cache:
            blocks.append(
                {"x": x, "qh": qh, "kh": kh, "vh": vh, "attn": attn, "ctx": ctx,
                 "mask1": mask1, "ln1c": ln1c, "x1": x1, "hpre": hpre, "h": h,
                 "mask2": mask2, "ln2c": ln2c}
            )
        x = x2
    cache = {"ids": ids, "valid": valid, "pos": pos, "scale": scale, "blocks": blocks} if need_cache else None
    return x, cache


def _encode_backward(state: ModelState, cache: dict, dx: np.ndarray, grads: dict[str, np.ndarray]) -> None:
    """Accumulate encoder gradients into ``grads`` given d(loss)/d(features)."""
    cfg = state.config
    P = state.params
    valid = cache["valid"]
    scale = cache["scale"]
    H = cfg.attention_heads

    def outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        # sum over batch and positions: a (B,L,D1), b (B,L,D2) -> (D1,D2)
        return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])

    for b in range(cfg.block_count - 1, -1, -1):
        c = cache["blocks"][b]
        p = f"blocks.{b}."
        dr2, dg2, db2 = _ln_backward(dx, P[p + "ln2.g"], c["ln2c"])
        grads[p + "ln2.g"] += dg2
        grads[p + "ln2.b"] += db2
        dx1 = dr2.copy()
        df = dr2 * c["mask2"] if c["mask2"] is not None else dr2
        grads[p + "ff.w2"] += outer(c["h"], df)
        grads[p + "ff.b2"] += _col_sum(df)
        dh = df @ P[p + "ff.w2"].T
        dhpre = dh * (c["hpre"] > 0.0)
        grads[p + "ff.w1"] += outer(c["x1"], dhpre)
        grads[p + "ff.b1"] += _col_sum(dhpre)
        dx1 += dhpre @ P[p + "ff.w1"].T

        dr1, dg1, db1 = _ln_backward(dx1, P[p + "ln1.g"], c["ln1c"])
        grads[p + "ln1.g"] += dg1
        grads[p + "ln1.b"] += db1
        dxin = dr1.copy()
        dod = dr1
        do = (dod * c["mask1"] if c["mask1"] is not None else dod) * valid[:, :, None]
        grads[p + "attn.wo"] += outer(c["ctx"], do)
        grads[p + "attn.bo"] += _col_sum(do)
        dctx = _split_heads(do @ P[p + "attn.wo"].T, H)
        dattn = dctx @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["attn"].transpose(0, 1, 3, 2) @ dctx
        # softmax rows: ds = a * (da - sum(da * a))
        inner = (dattn * c["attn"]).sum(axis=-1, keepdims=True)
        dscores = c["attn"] * (dattn - inner)
        de = dscores * scale
        dqh = de @ c["kh"]
        dkh = de.transpose(0, 1, 3, 2) @ c["qh"]
        dq, dk, dv = (_merge_heads(a) for a in (dqh, dkh, dvh))
        x_in = c["x"]
        for name, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
            grads[p + "attn." + name] += outer(x_in, dmat)
            grads[p + "attn.b" + name[1]] += _col_sum(dmat)
        dxin += dq @ P[p + "attn.wq"].T + dk @ P[p + "attn.wk"].T + dv @ P[p + "attn.wv"].T
        dx = dxin

    dx = dx * valid[:, :, None]
    flat_ids = cache["ids"][valid]
    flat_pos = cache["pos"][valid]
    flat_dx = dx[valid]
    np.add.at(grads["item_emb"], flat_ids, flat_dx)
    np.add.at(grads["pos_emb"], flat_pos, flat_dx)


def extract_features_batch(
    state: ModelState,
    prefixes: Sequence[Sequence[int]],
    train_mode: bool = False,
    dropout_seed: int = 0,
    batch_size: int = 512,
) -> np.ndarray:
    """Feature vectors (final-block output at the last position) per prefix."""
    out = np.empty((len(prefixes), state.config.embed_dim), dtype=state.config.np_dtype)
    for lo in range(0, len(prefixes), batch_size):
        chunk = prefixes[lo : lo + batch_size]
        feats, _ = _encode_batch(state, chunk, train_mode, dropout_seed)
        out[lo : lo + len(chunk)] = feats[:, -1, :]
    return out


def extract_features(
    state: ModelState,
    prefix: Sequence[int],
    train_mode: bool = False,
    dropout_seed: int = 0,
) -> np.ndarray:
    """Sequence representation of one prefix."""
    feats, _ = _encode_batch(state, [tuple(prefix)], train_mode, dropout_seed)
    return feats[0, -1, :]


def features_all_positions(state: ModelState, prefix: Sequence[int]) -> np.ndarray:
    """Per-position features of one sequence (causality checks)."""
    feats, _ = _encode_batch(state, [tuple(prefix)])
    return feats[0]


def predict_logits(state: ModelState, feature: np.ndarray, item_range: int | None = None) -> np.ndarray:
    """Shared-embedding decoder: logit_i = feature . item_embedding_i."""
    if item_range is None:
        item_range = state.item_count
    if item_range > state.item_count:
        raise ValueError("predict_logits: item_range exceeds the registry")
    return feature @ state.params["item_emb"][:item_range].T


# ---------------------------------------------------------------------------
# combined losses with gradients
# ---------------------------------------------------------------------------


@dataclass
class BatchSpec:
    """One optimization step's inputs: examples plus the loss recipe."""

    ce_examples: Sequence[TrainingExample] = ()
    ce_item_range: int | None = None
    kd_examples: Sequence[TrainingExample] = ()
    kd_teacher_probs: np.ndarray | None = None
    kd_item_range: int = 0
    kd_weight: float = 0.0
    ewc_anchor: dict[str, np.ndarray] | None = None
    ewc_fisher: dict[str, np.ndarray] | None = None
    ewc_weight: float = 0.0
    train_mode: bool = False
    dropout_seed: int = 0


def zero_gradients(state: ModelState) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p) for name, p in state.params.items()}


def loss_and_gradients(state: ModelState, spec: BatchSpec) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Evaluate the mixed loss and its exact parameter gradients.

    total = ce + kd_weight * kd + ewc_weight * ewc, each term present only
    when its inputs are supplied. Raises ``DivergenceError`` on a
    non-finite total.
    """
    grads = zero_gradients(state)
    E = state.params["item_emb"]
    ce_val = kd_val = ewc_val = 0.0

    if len(spec.ce_examples) > 0:
        rng_seed = np.random.SeedSequence([spec.dropout_seed, 0]).generate_state(1)[0]
        feats_all, cache = _encode_batch(
            state, [ex.prefix for ex in spec.ce_examples], spec.train_mode, int(rng_seed), need_cache=True
        )
        feats = feats_all[:, -1, :]
        item_range = spec.ce_item_range if spec.ce_item_range is not None else state.item_count
        targets = np.array([ex.target for ex in spec.ce_examples])
        if targets.max() >= item_range:
            raise ValueError("loss_and_gradients: CE target outside item range")
        logits = feats @ E[:item_range].T
        ce_val, dlogits = ce_from_logits(logits, targets)
        grads["item_emb"][:item_range] += dlogits.T @ feats
        dfeats = dlogits @ E[:item_range]
        dx = np.zeros_like(feats_all)
        dx[:, -1, :] = dfeats
        _encode_backward(state, cache, dx, grads)

    if len(spec.kd_examples) > 0 and spec.kd_weight != 0.0:
        if spec.kd_teacher_probs is None or spec.kd_item_range <= 0:
            raise ValueError("loss_and_gradients: KD requires teacher probs and an old-item range")
        rng_seed = np.random.SeedSequence([spec.dropout_seed, 1]).generate_state(1)[0]
        feats_all, cache = _encode_batch(
            state, [ex.prefix for ex in spec.kd_examples], spec.train_mode, int(rng_seed), need_cache=True
        )
        feats = feats_all[:, -1, :]
        logits = feats @ E[: spec.kd_item_range].T
        kd_val, dlogits = kd_from_logits(logits, spec.kd_teacher_probs)
        dlogits = dlogits * spec.kd_weight
        grads["item_emb"][: spec.kd_item_range] += dlogits.T @ feats
        dfeats = dlogits @ E[: spec.kd_item_range]
        dx = np.zeros_like(feats_all)
        dx[:, -1, :] = dfeats
        _encode_backward(state, cache, dx, grads)

    if spec.ewc_anchor is not None and spec.ewc_weight != 0.0:
        if spec.ewc_fisher is None:
            raise ValueError("loss_and_gradients: EWC requires fisher weights")
        for name, theta in state.params.items():
            diff = theta - spec.ewc_anchor[name]
            fw = spec.ewc_fisher[name]
            ewc_val += 0.5 * float((fw * diff * diff).sum())
            grads[name] += spec.ewc_weight * fw * diff

    total = ce_val + spec.kd_weight * kd_val + spec.ewc_weight * ewc_val
    if not math.isfinite(total):
        raise DivergenceError(f"non-finite loss: ce={ce_val} kd={kd_val} ewc={ewc_val}")
    return LossBreakdown(ce=ce_val, kd=kd_val, ewc=ewc_val, total=total), grads


def adam_step(
    state: ModelState,
    grads: dict[str, np.ndarray],
    lr: float = 5e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ModelState:
    """Bias-corrected Adam update, in place. Returns the state for chaining."""
    if set(grads) != set(state.params):
        raise ValueError("adam_step: gradient names do not match parameters")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, theta in state.params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"adam_step: shape mismatch for {name}")
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_model(state: ModelState, path: str | Path) -> None:
    """Self-describing checkpoint; round-trips bit-exactly via ``load_model``."""
    meta = {
        "config": dataclasses.asdict(state.config),
        "item_count": state.item_count,
        "step": state.step,
    }
    arrays = {"meta": np.array(json.dumps(meta))}
    for prefix, group in (("p", state.params), ("m", state.adam_m), ("v", state.adam_v)):
        for name, arr in group.items():
            arrays[f"{prefix}:{name}"] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path: str | Path) -> ModelState:
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["meta"][()]))
        cfg = ModelConfig(**meta["config"])
        groups: dict[str, dict[str, np.ndarray]] = {"p": {}, "m": {}, "v": {}}
        for key in npz.files:
            if key == "meta":
                continue
            prefix, name = key.split(":", 1)
            groups[prefix][name] = npz[key]
    return ModelState(cfg, meta["item_count"], groups["p"], groups["m"], groups["v"], meta["step"])
