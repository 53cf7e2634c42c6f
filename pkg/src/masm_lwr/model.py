"""Two-tower multi-aspect semantic matching model with manual gradients.

Each tower maps a fixed-length id sequence through shared embeddings, a
per-tower tanh projection, a ReLU self-attention map, and h width-w
convolution kernels that turn the attention map into h aspect weight
vectors; aspect vectors are the weighted sums of the projected embeddings.
The two towers' aspect vectors interact per aspect as
[q, p, q+p, q-p] and a small MLP head (tanh layer, linear layer, learned
weighted-sum pooling, sigmoid) produces a score in (0, 1).

All forward passes are batched; `backward_batch` implements exact
reverse-mode gradients for every parameter (PAD embedding row pinned to
zero, ReLU subgradient at 0 taken as 0). Training runs in float64;
serving exports float32.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .corpus import TextSequence
from . import tensorio

CHECKPOINT_MAGIC = b"MASM"

TOWERS = ("query", "product")


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 64
    h: int = 10
    w: int = 3
    query_max_len: int = 10
    title_max_len: int = 30
    normalize_aspect_weights: bool = False

    def validate(self) -> None:
        if self.d < 1 or self.h < 1:
            raise ValueError("d and h must be >= 1")
        if self.w < 1 or self.w % 2 == 0:
            raise ValueError(f"kernel width must be odd and >= 1, got {self.w}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    def parameter_count(self) -> int:
        d, h, w = self.d, self.h, self.w
        per_tower = d * d + d + 2 * d * d + h * w  # proj + attn + kernels
        head = 4 * d * d + d + d + 1 + h + 1
        return self.vocab_size * d + 2 * per_tower + head


def _glorot(rng, shape, fan_in, fan_out, dtype=np.float64):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class MasmParameters:
    """All trainable tensors, stored as an ordered name -> array mapping."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        config.validate()
        self.config = config
        self.tensors = tensors
        expected = config.parameter_count()
        actual = sum(int(np.prod(a.shape)) for a in tensors.values())
        if actual != expected:
            raise ValueError(f"parameter count mismatch: {actual} != {expected}")
        if np.any(tensors["embedding"][0] != 0):
            raise ValueError("PAD embedding row must be all-zero")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "MasmParameters":
        rng = np.random.default_rng(seed)
        d, h, w, V = config.d, config.h, config.w, config.vocab_size
        t: dict[str, np.ndarray] = {}
        t["embedding"] = _glorot(rng, (V, d), V, d)
        t["embedding"][0] = 0.0
        for tower in TOWERS:
            t[f"{tower}.proj_w"] = _glorot(rng, (d, d), d, d)
            t[f"{tower}.proj_b"] = np.zeros(d)
            t[f"{tower}.attn_q"] = _glorot(rng, (d, d), d, d)
            t[f"{tower}.attn_k"] = _glorot(rng, (d, d), d, d)
            t[f"{tower}.kernels"] = _glorot(rng, (h, w), w, 1)
        t["head.w1"] = _glorot(rng, (4 * d, d), 4 * d, d)
        # A zero bias here makes the pre-pool score an odd function of the
        # interaction vector, which suppresses the symmetric match signal
        # carried by the q+p / q-p blocks. Small random biases break that
        # symmetry and let training escape the flat region.
        t["head.b1"] = rng.normal(0.0, 0.1, size=d)
        t["head.w2"] = _glorot(rng, (d,), d, 1)
        t["head.b2"] = np.zeros(())
        t["head.pool_w"] = np.full(h, 1.0 / h)
        t["head.pool_b"] = np.zeros(())
        return cls(config, t)

    def new_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.tensors.items()}

    def copy(self) -> "MasmParameters":
        return MasmParameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "MasmParameters":
        return MasmParameters(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )

    def save(self, path, meta: dict | None = None) -> None:
        header = {"model_config": asdict(self.config)}
        if meta:
            header.update(meta)
        tensorio.write_container(path, CHECKPOINT_MAGIC, header, self.tensors)

    @classmethod
    def load(cls, path) -> tuple["MasmParameters", dict]:
        meta, tensors = tensorio.read_container(path, CHECKPOINT_MAGIC)
        cfg_doc = meta.pop("model_config")
        config = ModelConfig(**cfg_doc)
        return cls(config, tensors), meta


def tower_forward(params: MasmParameters, tower: str, ids: np.ndarray,
                  valid: np.ndarray) -> tuple[np.ndarray, dict]:
    """Batched aspect-vector computation for one tower.

    ids: (B, n) int ids; valid: (B,) non-pad lengths (>= 1).
    Returns aspects (B, h, d) and the trace needed for backward.
    """
    if np.any(valid < 1):
        raise ValueError("every sequence must have valid_len >= 1")
    cfg = params.config
    E = params["embedding"]
    dtype = E.dtype
    B, n = ids.shape
    mask = (np.arange(n)[None, :] < valid[:, None]).astype(dtype)  # (B, n)
    e = E[ids] * mask[:, :, None]
    h1 = e @ params[f"{tower}.proj_w"] + params[f"{tower}.proj_b"]
    e1 = np.tanh(h1)
    Q = e1 @ params[f"{tower}.attn_q"]
    K = e1 @ params[f"{tower}.attn_k"]
    a_raw = Q @ K.transpose(0, 2, 1)
    pos = a_raw > 0
    A = a_raw * pos * mask[:, None, :]
    valid_f = valid.astype(dtype)
    a_bar = (A * mask[:, :, None]).sum(axis=1) / valid_f[:, None]  # (B, n)

    o = (cfg.w - 1) // 2
    a_pad = np.zeros((B, n + 2 * o), dtype=dtype)
    a_pad[:, o:o + n] = a_bar
    slices = np.stack([a_pad[:, t:t + n] for t in range(cfg.w)])  # (w, B, n)
    alpha = np.tensordot(params[f"{tower}.kernels"], slices, axes=(1, 0))
    alpha = alpha.transpose(1, 0, 2) * mask[:, None, :]

    if cfg.normalize_aspect_weights:
        denom = np.abs(alpha).sum(axis=2, keepdims=True) + np.asarray(1e-8, dtype)
        alpha_used = alpha / denom
    else:
        denom = None
        alpha_used = alpha

    aspects = alpha_used @ e1
    trace = {
        "ids": ids, "mask": mask, "valid": valid_f, "e": e, "e1": e1,
        "Q": Q, "K": K, "pos": pos, "slices": slices, "alpha": alpha,
        "denom": denom, "alpha_used": alpha_used, "tower": tower,
    }
    return aspects, trace


def tower_backward(params: MasmParameters, trace: dict, d_aspects: np.ndarray,
                   grads: dict[str, np.ndarray]) -> None:
    """Accumulate gradients for one tower into `grads`."""
    cfg = params.config
    tower = trace["tower"]
    mask, e1 = trace["mask"], trace["e1"]
    B, n = mask.shape
    o = (cfg.w - 1) // 2

    d_alpha_used = d_aspects @ e1.transpose(0, 2, 1)
    de1 = trace["alpha_used"].transpose(0, 2, 1) @ d_aspects

    if cfg.normalize_aspect_weights:
        denom = trace["denom"]
        inner = (d_alpha_used * trace["alpha_used"]).sum(axis=2, keepdims=True)
        d_alpha = (d_alpha_used - inner * np.sign(trace["alpha"])) / denom
    else:
        d_alpha = d_alpha_used
    d_alpha = d_alpha * mask[:, None, :]

    h_, w_ = params[f"{tower}.kernels"].shape
    flat_slices = trace["slices"].reshape(w_, B * n)
    grads[f"{tower}.kernels"] += (
        d_alpha.transpose(1, 0, 2).reshape(h_, B * n) @ flat_slices.T
    )
    tmp = (params[f"{tower}.kernels"].T
           @ d_alpha.transpose(1, 0, 2).reshape(h_, B * n)).reshape(w_, B, n)
    d_a_pad = np.zeros((B, n + 2 * o), dtype=mask.dtype)
    for t in range(cfg.w):
        d_a_pad[:, t:t + n] += tmp[t]
    d_a_bar = d_a_pad[:, o:o + n]

    dA = (mask[:, :, None] / trace["valid"][:, None, None]) * d_a_bar[:, None, :]
    d_a_raw = dA * trace["pos"] * mask[:, None, :]

    dQ = d_a_raw @ trace["K"]
    dK = d_a_raw.transpose(0, 2, 1) @ trace["Q"]
    e1_flat = e1.reshape(B * n, -1)
    grads[f"{tower}.attn_q"] += e1_flat.T @ dQ.reshape(B * n, -1)
    grads[f"{tower}.attn_k"] += e1_flat.T @ dK.reshape(B * n, -1)
    de1 += dQ @ params[f"{tower}.attn_q"].T + dK @ params[f"{tower}.attn_k"].T

    dh1 = de1 * (1.0 - e1 * e1)
    grads[f"{tower}.proj_w"] += trace["e"].reshape(B * n, -1).T @ dh1.reshape(B * n, -1)
    grads[f"{tower}.proj_b"] += dh1.sum(axis=(0, 1))
    de = (dh1 @ params[f"{tower}.proj_w"].T) * mask[:, :, None]
    np.add.at(grads["embedding"], trace["ids"], de)
    grads["embedding"][0] = 0.0


def interact(q_aspects: np.ndarray, p_aspects: np.ndarray) -> np.ndarray:
    """Per-aspect [q, p, q+p, q-p] concatenation; last axis becomes 4d."""
    if q_aspects.shape != p_aspects.shape:
        raise ValueError(
            f"aspect shape mismatch: {q_aspects.shape} vs {p_aspects.shape}"
        )
    return np.concatenate(
        [q_aspects, p_aspects, q_aspects + p_aspects, q_aspects - p_aspects], axis=-1
    )


def head_forward(params: MasmParameters, r: np.ndarray) -> tuple[np.ndarray, dict]:
    """Score the interaction representation r (..., h, 4d) -> scores (...)."""
    z1 = r @ params["head.w1"] + params["head.b1"]
    hid = np.tanh(z1)
    s_aspects = hid @ params["head.w2"] + params["head.b2"]  # (..., h)
    logits = s_aspects @ params["head.pool_w"] + params["head.pool_b"]
    scores = _sigmoid(logits)
    trace = {"r": r, "hid": hid, "s_aspects": s_aspects, "scores": scores}
    return scores, trace


def head_backward_logits(params: MasmParameters, trace: dict, d_logits: np.ndarray,
                         grads: dict[str, np.ndarray]) -> np.ndarray:
    """Backprop the head from the pre-sigmoid logit; returns d_r."""
    grads["head.pool_w"] += d_logits @ trace["s_aspects"]
    grads["head.pool_b"] += d_logits.sum()
    ds = d_logits[:, None] * params["head.pool_w"][None, :]  # (B, h)
    hid = trace["hid"]
    B, h_, dd = hid.shape
    grads["head.w2"] += ds.reshape(B * h_) @ hid.reshape(B * h_, dd)
    grads["head.b2"] += ds.sum()
    d_hid = ds[:, :, None] * params["head.w2"][None, None, :]
    dz1 = d_hid * (1.0 - hid * hid)
    grads["head.w1"] += trace["r"].reshape(B * h_, -1).T @ dz1.reshape(B * h_, dd)
    grads["head.b1"] += dz1.sum(axis=(0, 1))
    return dz1 @ params["head.w1"].T


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def forward_batch(params: MasmParameters, q_ids, q_valid, t_ids, t_valid):
    """Full two-tower scoring; returns (scores (B,), trace)."""
    q_aspects, q_trace = tower_forward(params, "query", q_ids, q_valid)
    p_aspects, p_trace = tower_forward(params, "product", t_ids, t_valid)
    r = interact(q_aspects, p_aspects)
    scores, head_trace = head_forward(params, r)
    return scores, {"query": q_trace, "product": p_trace, "head": head_trace}


def backward_batch(params: MasmParameters, trace: dict,
                   d_scores: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of sum(d_scores * scores) w.r.t. every parameter."""
    scores = trace["head"]["scores"]
    return backward_from_logits(params, trace, d_scores * scores * (1.0 - scores))


def backward_from_logits(params: MasmParameters, trace: dict,
                         d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients with the upstream gradient given on the pre-sigmoid logit."""
    grads = params.new_grads()
    d_r = head_backward_logits(params, trace["head"], d_logits, grads)
    d = params.config.d
    dq = d_r[..., 0:d] + d_r[..., 2 * d:3 * d] + d_r[..., 3 * d:4 * d]
    dp = d_r[..., d:2 * d] + d_r[..., 2 * d:3 * d] - d_r[..., 3 * d:4 * d]
    tower_backward(params, trace["query"], dq, grads)
    tower_backward(params, trace["product"], dp, grads)
    return grads


# -- single-pair convenience wrappers -------------------------------------

def encode_tower(seq: TextSequence, params: MasmParameters, tower: str) -> np.ndarray:
    """Aspect vectors (h, d) for one sequence."""
    aspects, _ = tower_forward(
        params, tower, seq.ids[None, :], np.array([seq.valid_len])
    )
    return aspects[0]


def forward(query: TextSequence, title: TextSequence, params: MasmParameters) -> float:
    scores, _ = forward_batch(
        params,
        query.ids[None, :], np.array([query.valid_len]),
        title.ids[None, :], np.array([title.valid_len]),
    )
    return float(scores[0])


def score_from_aspects(params: MasmParameters, q_aspects: np.ndarray,
                       p_aspects: np.ndarray) -> np.ndarray:
    """Serving fast path: interaction + head only, over (B, h, d) inputs."""
    r = interact(np.asarray(q_aspects, dtype=np.float64),
                 np.asarray(p_aspects, dtype=np.float64))
    scores, _ = head_forward(params, r)
    return scores


def score_batch(params: MasmParameters, q_ids, q_valid, t_ids, t_valid,
                batch: int = 512) -> np.ndarray:
    """Memory-bounded batched scoring without traces."""
    out = np.empty(len(q_ids))
    for lo in range(0, len(q_ids), batch):
        hi = min(lo + batch, len(q_ids))
        scores, _ = forward_batch(params, q_ids[lo:hi], q_valid[lo:hi],
                                  t_ids[lo:hi], t_valid[lo:hi])
        out[lo:hi] = scores
    return out


def logits_batch(params: MasmParameters, q_ids, q_valid, t_ids, t_valid):
    """Pre-sigmoid logits with trace, for pair-wise training."""
    q_aspects, q_trace = tower_forward(params, "query", q_ids, q_valid)
    p_aspects, p_trace = tower_forward(params, "product", t_ids, t_valid)
    r = interact(q_aspects, p_aspects)
    scores, head_trace = head_forward(params, r)
    s = head_trace["s_aspects"]
    logits = s @ params["head.pool_w"] + params["head.pool_b"]
    return logits, {"query": q_trace, "product": p_trace, "head": head_trace}
