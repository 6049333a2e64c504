"""Attention-based duration regressor with hand-written reverse-mode gradients.

Architecture: a learned CLS row is prepended to the 64-row criteria matrix,
one or more pre-norm transformer blocks mix the sentences (masked key
positions are excluded from attention), the block outputs are mean-pooled
per criteria segment, pooled vectors are concatenated with the phase
one-hot and the drug/disease vectors, and a three-layer MLP with a softplus
output maps the result to a strictly positive duration in years.

Everything is numpy in float64. The backward pass mirrors the forward pass
exactly and is verified against central finite differences in the tests;
inference is a pure function of (params, trial), so identical inputs give
bit-identical outputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import erf, expit

from .embedding import S_MAX, S_TOTAL, EmbeddedTrial
from .errors import CheckpointError, NumericError

LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class ModelConfig:
    d: int
    heads: int = 2
    layers: int = 1
    ffn_dim: Optional[int] = None  # defaults to d
    mlp_hidden1: Optional[int] = None  # defaults to 2d
    mlp_hidden2: Optional[int] = None  # defaults to d
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = self.d
        if self.mlp_hidden1 is None:
            self.mlp_hidden1 = 2 * self.d
        if self.mlp_hidden2 is None:
            self.mlp_hidden2 = self.d
        if self.heads not in (2, 3, 4):
            raise ValueError(f"heads must be one of 2, 3, 4; got {self.heads}")
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def feature_dim(self) -> int:
        """Length of the concatenated feature vector: 4 + 4d."""
        return 4 + 4 * self.d


@dataclass
class LayerParams:
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


@dataclass
class HeadParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def items(self):
        for name in _HEAD_FIELDS:
            yield f"head.{name}", getattr(self, name)


_LAYER_FIELDS = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
                 "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
                 "ln1_g", "ln1_b", "ln2_g", "ln2_b")
_HEAD_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class ModelParams:
    """All learnable tensors, with a fixed canonical serialization order.

    Canonical order: the CLS embedding, then per layer the attention
    projections (each weight followed by its bias), the FFN pair, and the
    two layer norms, then the three head layers. ``items`` yields arrays in
    exactly that order; the flat vector and checkpoint format follow it.
    """

    config: ModelConfig
    cls_vec: np.ndarray
    layers: list[LayerParams]
    head: HeadParams

    def items(self):
        yield "cls", self.cls_vec
        for i, layer in enumerate(self.layers):
            for name in _LAYER_FIELDS:
                yield f"layer{i}.{name}", getattr(layer, name)
        for name in _HEAD_FIELDS:
            yield f"head.{name}", getattr(self.head, name)

    def names(self) -> list[str]:
        return [name for name, _ in self.items()]

    @property
    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.items())

    def to_flat(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.items()])

    @classmethod
    def from_flat(cls, config: ModelConfig, flat: np.ndarray) -> "ModelParams":
        template = init_params(config)
        expected = template.param_count
        if flat.size != expected:
            raise CheckpointError(f"flat vector has {flat.size} values, model needs {expected}")
        offset = 0
        for _, arr in template.items():
            chunk = flat[offset:offset + arr.size]
            arr[...] = np.asarray(chunk, dtype=np.float64).reshape(arr.shape)
            offset += arr.size
        return template

    def copy(self) -> "ModelParams":
        return ModelParams.from_flat(self.config, self.to_flat())


def expected_param_count(config: ModelConfig) -> int:
    """Closed-form parameter count implied by the config (shape audit)."""
    d, f = config.d, config.ffn_dim
    h1, h2 = config.mlp_hidden1, config.mlp_hidden2
    per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    head = config.feature_dim * h1 + h1 + h1 * h2 + h2 + h2 + 1
    return d + config.layers * per_layer + head


def _xavier(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape if shape is not None else (fan_in, fan_out))


def init_head(rng, feature_dim: int, hidden1: int, hidden2: int) -> HeadParams:
    """Xavier-uniform MLP head; also used standalone by the flat baseline."""
    return HeadParams(
        w1=_xavier(rng, feature_dim, hidden1), b1=np.zeros(hidden1),
        w2=_xavier(rng, hidden1, hidden2), b2=np.zeros(hidden2),
        w3=_xavier(rng, hidden2, 1), b3=np.zeros(1),
    )


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded Xavier-uniform weights, zero biases, unit layer-norm gains.

    Draws happen in canonical order, so the same seed always produces the
    same parameters.
    """
    rng = np.random.default_rng(config.seed)
    d, f = config.d, config.ffn_dim

    cls_vec = _xavier(rng, d, d, (d,))
    layers = []
    for _ in range(config.layers):
        layers.append(LayerParams(
            w_q=_xavier(rng, d, d), b_q=np.zeros(d),
            w_k=_xavier(rng, d, d), b_k=np.zeros(d),
            w_v=_xavier(rng, d, d), b_v=np.zeros(d),
            w_o=_xavier(rng, d, d), b_o=np.zeros(d),
            ffn_w1=_xavier(rng, d, f), ffn_b1=np.zeros(f),
            ffn_w2=_xavier(rng, f, d), ffn_b2=np.zeros(d),
            ln1_g=np.ones(d), ln1_b=np.zeros(d),
            ln2_g=np.ones(d), ln2_b=np.zeros(d),
        ))
    head = init_head(rng, config.feature_dim, config.mlp_hidden1, config.mlp_hidden2)
    return ModelParams(config=config, cls_vec=cls_vec, layers=layers, head=head)


def zeros_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.items()}


# --- primitive forward/backward pieces -------------------------------------


def _layernorm(x, gain, bias):
    mu = x.mean(-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * ivar
    return gain * xhat + bias, xhat, ivar


def _layernorm_backward(dout, xhat, ivar, gain):
    axes = tuple(range(dout.ndim - 1))
    dgain = (dout * xhat).sum(axes)
    dbias = dout.sum(axes)
    dxhat = dout * gain
    dx = ivar * (dxhat
                 - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dgain, dbias


def _gelu(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, cdf


def _gelu_grad(x, cdf):
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softplus(z):
    """ln(1 + e^z), numerically stable; keeps every prediction positive."""
    return np.logaddexp(0.0, z)


def _dropout_mask(rng, shape, p):
    # inverted scaling: surviving units are boosted so expectations match
    return (rng.random(shape) >= p) / (1.0 - p)


def _needs_dropout(config, train_mode, rng):
    if not train_mode or config.dropout == 0.0:
        return False
    if rng is None:
        raise ValueError("train_mode with dropout > 0 requires a dropout rng")
    return True


# --- transformer encoder ----------------------------------------------------


def add_cls_row(params: ModelParams, sentence_mat: np.ndarray) -> np.ndarray:
    """Prepend the learned CLS embedding: (64, d) -> (65, d)."""
    if sentence_mat.shape != (S_TOTAL, params.config.d):
        raise ValueError(
            f"sentence matrix has shape {sentence_mat.shape}, "
            f"want ({S_TOTAL}, {params.config.d})"
        )
    return np.concatenate([params.cls_vec[None, :], sentence_mat], axis=0)


def _encode_batch(params, sent, mask, train_mode=False, rng=None):
    """Transformer over (B, 64, d) sentence stacks -> pooled segment vectors.

    Returns (incl, excl, cache). Masked key positions get -inf attention
    logits, so padding rows can never influence a real row; a segment with
    no real sentences falls back to the CLS output row.
    """
    config = params.config
    use_dropout = _needs_dropout(config, train_mode, rng)
    B = sent.shape[0]
    S = S_TOTAL + 1
    H = config.heads
    dh = config.d // H
    scale = 1.0 / math.sqrt(dh)

    X = np.concatenate([np.broadcast_to(params.cls_vec, (B, 1, config.d)), sent], axis=1)
    valid = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)

    layer_caches = []
    for lp in params.layers:
        yn1, xhat1, ivar1 = _layernorm(X, lp.ln1_g, lp.ln1_b)
        q = (yn1 @ lp.w_q + lp.b_q).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        k = (yn1 @ lp.w_k + lp.b_k).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        v = (yn1 @ lp.w_v + lp.b_v).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        logits = (q @ k.swapaxes(-1, -2)) * scale
        logits = np.where(valid[:, None, None, :], logits, -np.inf)
        logits -= logits.max(-1, keepdims=True)  # CLS is always valid, so max is finite
        expl = np.exp(logits)
        attn = expl / expl.sum(-1, keepdims=True)
        z = (attn @ v).transpose(0, 2, 1, 3).reshape(B, S, config.d)
        out = z @ lp.w_o + lp.b_o
        attn_drop = _dropout_mask(rng, out.shape, config.dropout) if use_dropout else None
        if attn_drop is not None:
            out = out * attn_drop
        X1 = X + out

        yn2, xhat2, ivar2 = _layernorm(X1, lp.ln2_g, lp.ln2_b)
        h_pre = yn2 @ lp.ffn_w1 + lp.ffn_b1
        g, cdf = _gelu(h_pre)
        f_out = g @ lp.ffn_w2 + lp.ffn_b2
        ffn_drop = _dropout_mask(rng, f_out.shape, config.dropout) if use_dropout else None
        if ffn_drop is not None:
            f_out = f_out * ffn_drop
        X2 = X1 + f_out

        layer_caches.append(dict(
            yn1=yn1, xhat1=xhat1, ivar1=ivar1, q=q, k=k, v=v, attn=attn,
            z=z, attn_drop=attn_drop, yn2=yn2, xhat2=xhat2, ivar2=ivar2,
            h_pre=h_pre, cdf=cdf, g=g, ffn_drop=ffn_drop,
        ))
        X = X2

    incl_mask = mask[:, :S_MAX]
    excl_mask = mask[:, S_MAX:]
    incl, incl_count = _masked_mean(X, incl_mask, 1)
    excl, excl_count = _masked_mean(X, excl_mask, 1 + S_MAX)
    if not (np.isfinite(incl).all() and np.isfinite(excl).all()):
        raise NumericError("non-finite values in criteria_pooling")

    cache = dict(layers=layer_caches, mask=mask, valid=valid, scale=scale,
                 incl_count=incl_count, excl_count=excl_count, B=B, S=S, H=H, dh=dh)
    return incl, excl, cache


def _masked_mean(X, seg_mask, start):
    rows = X[:, start:start + S_MAX]
    count = seg_mask.sum(1)
    pooled = (rows * seg_mask[:, :, None]).sum(1) / np.maximum(count, 1)[:, None]
    pooled = np.where((count == 0)[:, None], X[:, 0], pooled)
    return pooled, count


def _encode_backward(params, cache, dincl, dexcl):
    config = params.config
    B, S, H, dh = cache["B"], cache["S"], cache["H"], cache["dh"]
    scale = cache["scale"]
    mask = cache["mask"]
    grads = {}

    dX = np.zeros((B, S, config.d))
    for dvec, count, start in (
        (dincl, cache["incl_count"], 1),
        (dexcl, cache["excl_count"], 1 + S_MAX),
    ):
        seg_mask = mask[:, start - 1:start - 1 + S_MAX]
        weights = seg_mask / np.maximum(count, 1)[:, None]
        dX[:, start:start + S_MAX] += weights[:, :, None] * dvec[:, None, :]
        dX[:, 0] += np.where((count == 0)[:, None], dvec, 0.0)

    for i in range(len(params.layers) - 1, -1, -1):
        lp = params.layers[i]
        lc = cache["layers"][i]
        prefix = f"layer{i}."

        # FFN sub-layer (residual: X2 = X1 + drop(FFN(LN2(X1))))
        df_out = dX if lc["ffn_drop"] is None else dX * lc["ffn_drop"]
        grads[prefix + "ffn_w2"] = np.einsum("bsf,bsd->fd", lc["g"], df_out)
        grads[prefix + "ffn_b2"] = df_out.sum((0, 1))
        dg = df_out @ lp.ffn_w2.T
        dh_pre = dg * _gelu_grad(lc["h_pre"], lc["cdf"])
        grads[prefix + "ffn_w1"] = np.einsum("bsd,bsf->df", lc["yn2"], dh_pre)
        grads[prefix + "ffn_b1"] = dh_pre.sum((0, 1))
        dyn2 = dh_pre @ lp.ffn_w1.T
        dx_ln2, grads[prefix + "ln2_g"], grads[prefix + "ln2_b"] = _layernorm_backward(
            dyn2, lc["xhat2"], lc["ivar2"], lp.ln2_g)
        dX = dX + dx_ln2

        # attention sub-layer (residual: X1 = X + drop(MHA(LN1(X))))
        dout = dX if lc["attn_drop"] is None else dX * lc["attn_drop"]
        grads[prefix + "w_o"] = np.einsum("bsd,bse->de", lc["z"], dout)
        grads[prefix + "b_o"] = dout.sum((0, 1))
        dz = (dout @ lp.w_o.T).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        dattn = dz @ lc["v"].swapaxes(-1, -2)
        dv = lc["attn"].swapaxes(-1, -2) @ dz
        dlogits = lc["attn"] * (dattn - (dattn * lc["attn"]).sum(-1, keepdims=True))
        dq = (dlogits @ lc["k"]) * scale
        dk = (dlogits.swapaxes(-1, -2) @ lc["q"]) * scale
        dq = dq.transpose(0, 2, 1, 3).reshape(B, S, config.d)
        dk = dk.transpose(0, 2, 1, 3).reshape(B, S, config.d)
        dv = dv.transpose(0, 2, 1, 3).reshape(B, S, config.d)
        yn1 = lc["yn1"]
        grads[prefix + "w_q"] = np.einsum("bsd,bse->de", yn1, dq)
        grads[prefix + "b_q"] = dq.sum((0, 1))
        grads[prefix + "w_k"] = np.einsum("bsd,bse->de", yn1, dk)
        grads[prefix + "b_k"] = dk.sum((0, 1))
        grads[prefix + "w_v"] = np.einsum("bsd,bse->de", yn1, dv)
        grads[prefix + "b_v"] = dv.sum((0, 1))
        dyn1 = dq @ lp.w_q.T + dk @ lp.w_k.T + dv @ lp.w_v.T
        dx_ln1, grads[prefix + "ln1_g"], grads[prefix + "ln1_b"] = _layernorm_backward(
            dyn1, lc["xhat1"], lc["ivar1"], lp.ln1_g)
        dX = dX + dx_ln1

    grads["cls"] = dX[:, 0].sum(0)
    return grads


def encode_criteria(params: ModelParams, sentence_mat: np.ndarray, mask: np.ndarray,
                    segment=None) -> tuple[np.ndarray, np.ndarray]:
    """Pooled (inclusion, exclusion) vectors for one 64-row criteria matrix.

    ``segment`` is accepted for symmetry with the fixed slot layout
    (inclusion 0..31, exclusion 32..63) and validated if given.
    """
    if segment is not None:
        expected = ("inclusion",) * S_MAX + ("exclusion",) * S_MAX
        if tuple(segment) != expected:
            raise ValueError("segment labels must follow the fixed 32+32 slot layout")
    if sentence_mat.shape != (S_TOTAL, params.config.d):
        raise ValueError(f"sentence matrix has shape {sentence_mat.shape}, "
                         f"want ({S_TOTAL}, {params.config.d})")
    incl, excl, _ = _encode_batch(
        params, sentence_mat[None, :, :].astype(np.float64),
        np.asarray(mask, dtype=bool)[None, :])
    return incl[0], excl[0]


def concat_features(phase_onehot, drug_vec, disease_vec, incl_vec, excl_vec) -> np.ndarray:
    """Feature layout [phase(4) | drug(d) | disease(d) | inclusion(d) | exclusion(d)]."""
    parts = [np.asarray(p, dtype=np.float64) for p in
             (phase_onehot, drug_vec, disease_vec, incl_vec, excl_vec)]
    if parts[0].shape[-1] != 4:
        raise ValueError(f"phase one-hot must have length 4, got {parts[0].shape[-1]}")
    d = parts[1].shape[-1]
    for name, p in zip(("disease", "inclusion", "exclusion"), parts[2:]):
        if p.shape[-1] != d:
            raise ValueError(f"{name} vector has length {p.shape[-1]}, drug vector has {d}")
    return np.concatenate(parts, axis=-1)


# --- MLP regression head ----------------------------------------------------


def head_forward(head: HeadParams, feat, dropout=0.0, train_mode=False, rng=None):
    """Linear-ReLU-Dropout twice, then a linear logit; returns (z, cache)."""
    use_dropout = train_mode and dropout > 0.0
    if use_dropout and rng is None:
        raise ValueError("train_mode with dropout > 0 requires a dropout rng")
    h1_pre = feat @ head.w1 + head.b1
    h1 = np.maximum(h1_pre, 0.0)
    m1 = _dropout_mask(rng, h1.shape, dropout) if use_dropout else None
    h1d = h1 * m1 if m1 is not None else h1
    h2_pre = h1d @ head.w2 + head.b2
    h2 = np.maximum(h2_pre, 0.0)
    m2 = _dropout_mask(rng, h2.shape, dropout) if use_dropout else None
    h2d = h2 * m2 if m2 is not None else h2
    z = (h2d @ head.w3 + head.b3)[..., 0]
    if not np.isfinite(z).all():
        raise NumericError("non-finite values in head_logit")
    cache = dict(feat=feat, h1_pre=h1_pre, h1d=h1d, h2_pre=h2_pre, h2d=h2d, m1=m1, m2=m2)
    return z, cache


def head_backward(head: HeadParams, cache, dz):
    """Gradient of the head; returns (dfeat, grads keyed head.*)."""
    grads = {}
    dz = dz[..., None]
    grads["head.w3"] = np.einsum("bh,bo->ho", cache["h2d"], dz)
    grads["head.b3"] = dz.sum(0)
    dh2d = dz @ head.w3.T
    if cache["m2"] is not None:
        dh2d = dh2d * cache["m2"]
    dh2_pre = dh2d * (cache["h2_pre"] > 0.0)
    grads["head.w2"] = np.einsum("bh,bk->hk", cache["h1d"], dh2_pre)
    grads["head.b2"] = dh2_pre.sum(0)
    dh1d = dh2_pre @ head.w2.T
    if cache["m1"] is not None:
        dh1d = dh1d * cache["m1"]
    dh1_pre = dh1d * (cache["h1_pre"] > 0.0)
    grads["head.w1"] = np.einsum("bf,bh->fh", cache["feat"], dh1_pre)
    grads["head.b1"] = dh1_pre.sum(0)
    dfeat = dh1_pre @ head.w1.T
    return dfeat, grads


# --- full model -------------------------------------------------------------


def forward_batch(params: ModelParams, phase, drug, disease, sent, mask,
                  train_mode=False, rng=None):
    """Batched prediction; returns (yhat (B,), cache for the backward pass)."""
    incl, excl, enc_cache = _encode_batch(params, sent, mask, train_mode, rng)
    feat = concat_features(phase, drug, disease, incl, excl)
    z, head_cache = head_forward(params.head, feat, params.config.dropout, train_mode, rng)
    yhat = softplus(z)
    cache = dict(encoder=enc_cache, head=head_cache, z=z, d=params.config.d)
    return yhat, cache


def backward_batch(params: ModelParams, cache, dyhat):
    """Gradients of a scalar loss w.r.t. every parameter, given dL/dyhat."""
    dz = dyhat * expit(cache["z"])
    dfeat, grads = head_backward(params.head, cache["head"], dz)
    d = cache["d"]
    dincl = dfeat[:, 4 + 2 * d:4 + 3 * d]
    dexcl = dfeat[:, 4 + 3 * d:]
    grads.update(_encode_backward(params, cache["encoder"], dincl, dexcl))
    return grads


def batch_arrays(trials: list[EmbeddedTrial]):
    """Stack a list of embedded trials into batched forward inputs."""
    phase = np.stack([t.phase_onehot for t in trials]).astype(np.float64)
    drug = np.stack([t.drug_vec for t in trials]).astype(np.float64)
    disease = np.stack([t.disease_vec for t in trials]).astype(np.float64)
    sent = np.stack([t.sentence_mat for t in trials]).astype(np.float64)
    mask = np.stack([t.sentence_mask for t in trials]).astype(bool)
    return phase, drug, disease, sent, mask


def forward(params: ModelParams, trial: EmbeddedTrial,
            train_mode: bool = False, dropout_rng=None) -> float:
    """Predicted duration in years for one trial (always > 0)."""
    if trial.dim != params.config.d:
        raise ValueError(f"trial embedded with d={trial.dim}, model expects {params.config.d}")
    yhat, _ = forward_batch(params, *batch_arrays([trial]),
                            train_mode=train_mode, rng=dropout_rng)
    return float(yhat[0])


# --- checkpoints ------------------------------------------------------------

CHECKPOINT_ORDER = "canonical-v1"


def save_checkpoint(params: ModelParams, path: str | Path) -> Path:
    """Write a JSON manifest plus a little-endian float32 flat array file."""
    path = Path(path)
    array_name = path.name + ".bin"
    flat = params.to_flat().astype("<f4")
    manifest = {
        "config": asdict(params.config),
        "seed": params.config.seed,
        "param_count": int(flat.size),
        "order": CHECKPOINT_ORDER,
        "array_file": array_name,
    }
    (path.parent / array_name).write_bytes(flat.tobytes())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{path}: bad manifest: {err}") from err
    if manifest.get("order") != CHECKPOINT_ORDER:
        raise CheckpointError(f"{path}: unknown parameter order {manifest.get('order')!r}")
    config = ModelConfig(**manifest["config"])
    flat = np.fromfile(path.parent / manifest["array_file"], dtype="<f4")
    declared = manifest.get("param_count")
    if flat.size != declared:
        raise CheckpointError(
            f"{path}: array file holds {flat.size} values, manifest declares {declared}")
    if declared != expected_param_count(config):
        raise CheckpointError(
            f"{path}: manifest param_count {declared} does not match config "
            f"({expected_param_count(config)})")
    return ModelParams.from_flat(config, flat.astype(np.float64))
