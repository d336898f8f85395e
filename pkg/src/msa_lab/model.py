"""The trainable network: conv encoder, projection head, bilinear similarity.

The encoder is a stack of strided valid convolutions with ReLU, a global max
pool over the final feature map, and a dense layer to the feature dimension.
The projection head is linear -> layer norm -> tanh. Similarity between
embeddings is the bilinear form a^T W c. Gradients come from the tape in
`autodiff`; parameters live in plain float arrays so the whole state can be
serialized one named tensor per parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import loss as loss_mod
from . import tensorfile
from .autodiff import Tape, Tensor
from .config import ModelConfig, substream

LAYERNORM_EPS = 1e-5


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """He-style fan-in uniform weights, zero biases, scaled-Gaussian bilinear W."""
    cfg.validate()
    rng = substream(cfg.init_seed if cfg.init_seed is not None else seed, "init")

    def he(shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape)

    tensors: dict[str, np.ndarray] = {}
    in_ch = 1
    for i, (out_ch, kernel, _) in enumerate(cfg.encoder_spec):
        kh, kw = kernel
        tensors[f"conv{i}/w"] = he((out_ch, in_ch, kh, kw), in_ch * kh * kw)
        tensors[f"conv{i}/b"] = np.zeros(out_ch)
        in_ch = out_ch
    tensors["dense/w"] = he((in_ch, cfg.feature_dim), in_ch)
    tensors["dense/b"] = np.zeros(cfg.feature_dim)
    tensors["proj/w"] = he((cfg.embed_dim, cfg.feature_dim), cfg.feature_dim)
    tensors["proj/b"] = np.zeros(cfg.embed_dim)
    tensors["ln/gain"] = np.ones(cfg.embed_dim)
    tensors["ln/offset"] = np.zeros(cfg.embed_dim)
    tensors["bilinear/w"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.embed_dim),
                                       size=(cfg.embed_dim, cfg.embed_dim))
    return ModelParams(cfg, {k: v.astype(dtype) for k, v in tensors.items()})


def _wrap(params: ModelParams, requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.tensors.items()}


def encoder_graph(tape: Tape, cfg: ModelConfig, pt: dict[str, Tensor], x: Tensor) -> Tensor:
    h = x
    for i, (_, _, stride) in enumerate(cfg.encoder_spec):
        h = ad.conv2d(tape, h, pt[f"conv{i}/w"], pt[f"conv{i}/b"], tuple(stride))
        h = ad.relu(tape, h)
    h = ad.global_max_pool(tape, h)
    h = ad.matmul(tape, h, pt["dense/w"])
    return ad.add_row_bias(tape, h, pt["dense/b"])


def projection_graph(tape: Tape, pt: dict[str, Tensor], features: Tensor) -> Tensor:
    h = ad.matmul(tape, features, ad.transpose(tape, pt["proj/w"]))
    h = ad.add_row_bias(tape, h, pt["proj/b"])
    h = ad.layer_norm(tape, h, pt["ln/gain"], pt["ln/offset"], eps=LAYERNORM_EPS)
    return ad.tanh(tape, h)


def _check_crop_shape(cfg: ModelConfig, crops: np.ndarray) -> None:
    expected = tuple(cfg.input_shape)
    if crops.shape[-2:] != expected:
        raise ValueError(f"crop shape {crops.shape[-2:]} does not match configured {expected}")


def encode_batch(params: ModelParams, crops: np.ndarray) -> np.ndarray:
    """(B, mels, frames) -> (B, feature_dim) with the projection head unused."""
    _check_crop_shape(params.config, crops)
    dtype = next(iter(params.tensors.values())).dtype
    x = ad.constant(np.ascontiguousarray(crops[:, None]).astype(dtype, copy=False))
    tape = Tape()
    return encoder_graph(tape, params.config, _wrap(params, False), x).data


def encode(params: ModelParams, segment: np.ndarray) -> np.ndarray:
    return encode_batch(params, np.asarray(segment)[None])[0]


def project_batch(params: ModelParams, features: np.ndarray) -> np.ndarray:
    dtype = next(iter(params.tensors.values())).dtype
    tape = Tape()
    f = ad.constant(np.asarray(features, dtype=dtype))
    return projection_graph(tape, _wrap(params, False), f).data


def project(params: ModelParams, feature: np.ndarray) -> np.ndarray:
    return project_batch(params, np.asarray(feature)[None])[0]


def bilinear_similarity(w: np.ndarray, anchors: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """S[i, k] = anchors[i] @ w @ candidates[k]."""
    anchors = np.atleast_2d(anchors)
    candidates = np.atleast_2d(candidates)
    if w.shape != (anchors.shape[1], candidates.shape[1]):
        raise ValueError(f"bilinear shape mismatch: W {w.shape}, anchors {anchors.shape}, "
                         f"candidates {candidates.shape}")
    return anchors @ (w @ candidates.T)


def forward_backward(params: ModelParams, batch, spec, compute_grads: bool = True):
    """Loss of one pair batch plus gradients for every parameter tensor."""
    _check_crop_shape(params.config, batch.anchors)
    dtype = next(iter(params.tensors.values())).dtype
    b = len(batch)
    stacked = np.concatenate([batch.anchors, batch.positives])[:, None].astype(dtype, copy=False)

    tape = Tape()
    pt = _wrap(params, compute_grads)
    feats = encoder_graph(tape, params.config, pt, ad.constant(stacked))
    emb = projection_graph(tape, pt, feats)
    anchors_t = ad.slice_rows(tape, emb, 0, b)
    positives_t = ad.slice_rows(tape, emb, b, 2 * b)
    loss_t = loss_mod.loss_graph(tape, anchors_t, positives_t, batch.silent_mask,
                                 pt["bilinear/w"], spec)
    value = float(loss_t.data)
    if not np.isfinite(value):
        raise ValueError("numerical_blowup")
    if not compute_grads:
        return value, None
    tape.backward(loss_t)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in pt.items()}
    return value, grads


def save_params(params: ModelParams, path) -> None:
    tensorfile.write_tensors(path, params.tensors)


def load_params(path, cfg: ModelConfig) -> ModelParams:
    tensors = tensorfile.read_tensors(path)
    reference = init_params(cfg, seed=0)
    if set(tensors) != set(reference.tensors):
        raise ValueError(f"checkpoint {path} does not match the model config "
                         f"(tensor names differ)")
    for name, arr in tensors.items():
        if arr.shape != reference.tensors[name].shape:
            raise ValueError(f"checkpoint {path}: tensor {name} has shape {arr.shape}, "
                             f"config expects {reference.tensors[name].shape}")
    return ModelParams(cfg, tensors)
