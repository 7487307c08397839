"""Tiny dual encoders plus classification/fusion heads, with exact backprop.

Text encoder: mean of token embeddings -> one tanh layer -> L2 norm.
Image encoder: 48 -> 64 -> 32 tanh MLP -> L2 norm.
The attribute head shares one weight matrix across both modalities; the
fusion heads consume concat(text, image) embeddings. All gradients are
hand-derived; forward passes return caches that the backward passes
verify for staleness (parameter arrays must be the same objects).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, StaleCache, UnknownToken
from .numerics import child_rng, l2_normalize_rows

EMBED_DIM = 32
TEXT_HIDDEN = 32
IMAGE_INPUT = 48
IMAGE_HIDDEN = 64
FUSION_HIDDEN = 32
INIT_SCALE = 0.05

Params = dict  # name -> np.ndarray, float64


@dataclass
class EmbeddingBatch:
    """Unit-normalized text/image embeddings for one mini-batch."""

    f_txt: np.ndarray
    f_img: np.ndarray

    def __post_init__(self):
        for name, m in (("f_txt", self.f_txt), ("f_img", self.f_img)):
            if m.ndim != 2 or m.shape[1] != EMBED_DIM:
                raise DimensionMismatch(f"{name} must be Bx{EMBED_DIM}, got {m.shape}")
            norms = np.sqrt((m * m).sum(axis=1))
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise DimensionMismatch(f"{name} rows are not unit-normalized")


def _encoder_shapes(vocab_size: int) -> dict:
    return {
        "tok_embed": (vocab_size, EMBED_DIM),
        "txt_w": (EMBED_DIM, TEXT_HIDDEN),
        "txt_b": (TEXT_HIDDEN,),
        "img_w1": (IMAGE_INPUT, IMAGE_HIDDEN),
        "img_b1": (IMAGE_HIDDEN,),
        "img_w2": (IMAGE_HIDDEN, EMBED_DIM),
        "img_b2": (EMBED_DIM,),
    }


def pedestrian_param_shapes(vocab_size: int, n_attributes: int) -> dict:
    shapes = _encoder_shapes(vocab_size)
    shapes.update({
        "attr_w": (EMBED_DIM, n_attributes),
        "attr_b": (n_attributes,),
        "irr_w1": (2 * EMBED_DIM, FUSION_HIDDEN),
        "irr_b1": (FUSION_HIDDEN,),
        "irr_w2": (FUSION_HIDDEN, vocab_size),
        "irr_b2": (vocab_size,),
    })
    return shapes


def vehicle_param_shapes(vocab_size: int) -> dict:
    shapes = _encoder_shapes(vocab_size)
    shapes.update({
        "itm_w1": (2 * EMBED_DIM, FUSION_HIDDEN),
        "itm_b1": (FUSION_HIDDEN,),
        "itm_w2": (FUSION_HIDDEN, 2),
        "itm_b2": (2,),
    })
    return shapes


def init_params(shapes: dict, seed: int, tau_fitc: float | None = None) -> Params:
    params: Params = {}
    for name, shape in shapes.items():
        rng = child_rng(seed, f"init/{name}")
        params[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
    if tau_fitc is not None:
        params["tau_fitc"] = np.array([tau_fitc], dtype=np.float64)
    return params


def init_pedestrian_params(vocab_size: int, n_attributes: int, seed: int) -> Params:
    return init_params(pedestrian_param_shapes(vocab_size, n_attributes), seed)


def init_vehicle_params(vocab_size: int, seed: int, tau_fitc: float = 0.07) -> Params:
    return init_params(vehicle_param_shapes(vocab_size), seed, tau_fitc=tau_fitc)


def _refs(params: Params, names) -> tuple:
    return tuple((n, params[n]) for n in names)


def _check_refs(params: Params, refs) -> None:
    for name, arr in refs:
        if params.get(name) is not arr:
            raise StaleCache(f"cache parameter {name!r} is not the current array")


def _norm_backward(d_f: np.ndarray, f: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # f = h / ||h||;  dh = (df - f * <df, f>) / ||h||
    inner = (d_f * f).sum(axis=1, keepdims=True)
    return (d_f - f * inner) / norms[:, None]


def encode_text_batch(params: Params, token_lists) -> tuple[np.ndarray, dict]:
    """Unit-norm embeddings for a batch of token-id lists, plus backward cache."""
    tok_embed = params["tok_embed"]
    vocab_size = tok_embed.shape[0]
    if len(token_lists) == 0:
        raise UnknownToken("empty batch of token lists")
    means = np.zeros((len(token_lists), EMBED_DIM))
    for b, tokens in enumerate(token_lists):
        if len(tokens) == 0:
            raise UnknownToken("empty token list")
        ids = np.asarray(tokens, dtype=np.intp)
        if ids.min() < 0 or ids.max() >= vocab_size:
            raise UnknownToken(f"token id out of range for vocab size {vocab_size}")
        means[b] = tok_embed[ids].mean(axis=0)
    hidden = np.tanh(means @ params["txt_w"] + params["txt_b"])
    f, norms = l2_normalize_rows(hidden)
    cache = {
        "kind": "text", "tokens": [list(t) for t in token_lists],
        "means": means, "hidden": hidden, "f": f, "norms": norms,
        "refs": _refs(params, ("tok_embed", "txt_w", "txt_b")),
    }
    return f, cache


def text_backward(params: Params, cache: dict, d_f: np.ndarray) -> dict:
    if cache.get("kind") != "text":
        raise StaleCache("expected a text-encoder cache")
    _check_refs(params, cache["refs"])
    hidden, f, norms, means = cache["hidden"], cache["f"], cache["norms"], cache["means"]
    d_hidden = _norm_backward(np.asarray(d_f, dtype=np.float64), f, norms)
    d_pre = d_hidden * (1.0 - hidden * hidden)
    grads = {
        "txt_w": means.T @ d_pre,
        "txt_b": d_pre.sum(axis=0),
        "tok_embed": np.zeros_like(params["tok_embed"]),
    }
    d_means = d_pre @ params["txt_w"].T
    for b, tokens in enumerate(cache["tokens"]):
        contribution = d_means[b] / len(tokens)
        np.add.at(grads["tok_embed"], np.asarray(tokens, dtype=np.intp), contribution)
    return grads


def encode_image_batch(params: Params, features: np.ndarray) -> tuple[np.ndarray, dict]:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != IMAGE_INPUT:
        raise DimensionMismatch(f"expected Bx{IMAGE_INPUT} features, got {x.shape}")
    h1 = np.tanh(x @ params["img_w1"] + params["img_b1"])
    h2 = np.tanh(h1 @ params["img_w2"] + params["img_b2"])
    f, norms = l2_normalize_rows(h2)
    cache = {
        "kind": "image", "x": x, "h1": h1, "h2": h2, "f": f, "norms": norms,
        "refs": _refs(params, ("img_w1", "img_b1", "img_w2", "img_b2")),
    }
    return f, cache


def image_backward(params: Params, cache: dict, d_f: np.ndarray) -> dict:
    if cache.get("kind") != "image":
        raise StaleCache("expected an image-encoder cache")
    _check_refs(params, cache["refs"])
    x, h1, h2, f, norms = cache["x"], cache["h1"], cache["h2"], cache["f"], cache["norms"]
    d_h2 = _norm_backward(np.asarray(d_f, dtype=np.float64), f, norms)
    d_pre2 = d_h2 * (1.0 - h2 * h2)
    d_h1 = d_pre2 @ params["img_w2"].T
    d_pre1 = d_h1 * (1.0 - h1 * h1)
    return {
        "img_w2": h1.T @ d_pre2,
        "img_b2": d_pre2.sum(axis=0),
        "img_w1": x.T @ d_pre1,
        "img_b1": d_pre1.sum(axis=0),
    }


def encode_text(tokens, params: Params) -> tuple[np.ndarray, dict]:
    """Single-sample text forward; returns the pre-norm embedding and cache."""
    _, cache = encode_text_batch(params, [tokens])
    return cache["hidden"][0].copy(), cache


def encode_image(features: np.ndarray, params: Params) -> tuple[np.ndarray, dict]:
    """Single-sample image forward; returns the pre-norm embedding and cache."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch(f"expected a flat feature vector, got {x.shape}")
    _, cache = encode_image_batch(params, x[None, :])
    return cache["h2"][0].copy(), cache


def attribute_logits(embeddings: np.ndarray, params: Params) -> tuple[np.ndarray, dict]:
    """Shared-head attribute logits: W e + b, same parameters per modality."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] != EMBED_DIM:
        raise DimensionMismatch(f"expected Bx{EMBED_DIM} embeddings, got {e.shape}")
    logits = e @ params["attr_w"] + params["attr_b"]
    cache = {"kind": "attr", "e": e, "refs": _refs(params, ("attr_w", "attr_b"))}
    return logits, cache


def attribute_head_backward(params: Params, cache: dict,
                            d_logits: np.ndarray) -> tuple[dict, np.ndarray]:
    if cache.get("kind") != "attr":
        raise StaleCache("expected an attribute-head cache")
    _check_refs(params, cache["refs"])
    e = cache["e"]
    grads = {"attr_w": e.T @ d_logits, "attr_b": d_logits.sum(axis=0)}
    return grads, d_logits @ params["attr_w"].T


def fusion_forward(params: Params, prefix: str, f_a: np.ndarray,
                   f_b: np.ndarray) -> tuple[np.ndarray, dict]:
    """concat -> tanh hidden -> linear logits; prefix is 'itm' or 'irr'."""
    a = np.asarray(f_a, dtype=np.float64)
    b = np.asarray(f_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != EMBED_DIM:
        raise DimensionMismatch(f"fusion inputs must both be Bx{EMBED_DIM}")
    z = np.concatenate([a, b], axis=1)
    w1, b1 = params[f"{prefix}_w1"], params[f"{prefix}_b1"]
    w2, b2 = params[f"{prefix}_w2"], params[f"{prefix}_b2"]
    h = np.tanh(z @ w1 + b1)
    logits = h @ w2 + b2
    cache = {
        "kind": f"fusion/{prefix}", "z": z, "h": h,
        "refs": _refs(params, (f"{prefix}_w1", f"{prefix}_b1",
                               f"{prefix}_w2", f"{prefix}_b2")),
    }
    return logits, cache


def fusion_backward(params: Params, prefix: str, cache: dict,
                    d_logits: np.ndarray) -> tuple[dict, np.ndarray, np.ndarray]:
    if cache.get("kind") != f"fusion/{prefix}":
        raise StaleCache(f"expected a fusion/{prefix} cache")
    _check_refs(params, cache["refs"])
    z, h = cache["z"], cache["h"]
    w1, w2 = params[f"{prefix}_w1"], params[f"{prefix}_w2"]
    grads = {
        f"{prefix}_w2": h.T @ d_logits,
        f"{prefix}_b2": d_logits.sum(axis=0),
    }
    d_h = d_logits @ w2.T
    d_pre = d_h * (1.0 - h * h)
    grads[f"{prefix}_w1"] = z.T @ d_pre
    grads[f"{prefix}_b1"] = d_pre.sum(axis=0)
    d_z = d_pre @ w1.T
    return grads, d_z[:, :EMBED_DIM], d_z[:, EMBED_DIM:]


def accumulate(total: dict, grads: dict, weight: float = 1.0) -> None:
    """Add weighted gradients into a running dictionary, in place."""
    for name, g in grads.items():
        if name in total:
            total[name] = total[name] + weight * g
        else:
            total[name] = weight * g
