"""Finite-difference verification of every analytic gradient.

Each loss is checked on seeded random batches (B alternates between 4
and 8). Gradients over small tensors are verified coordinate by
coordinate; for large parameter tensors a seeded random subset of
coordinates is checked each seed, so across the seed sweep every tensor
accumulates thousands of verified coordinates while the whole suite
stays well under the runtime budget.
"""
from __future__ import annotations

import numpy as np

from . import losses, model
from .datagen import (AttributeSet, AttributeVocabulary, PedestrianSample,
                      build_shared_vocab, caption_from_attributes,
                      vehicle_caption, DEFAULT_VEHICLE_TYPES)
from .augment import DEFAULT_PALETTE
from .numerics import child_rng, finite_difference_gradient, relative_error

LOSS_NAMES = ("ac", "irm", "irr", "fitc", "fitm", "pedestrian", "vehicle")
FD_STEP = 1e-6
SUBSAMPLE_LIMIT = 256   # tensors up to this size are checked exhaustively
SUBSAMPLE_COORDS = 48


def _fd_subset(f, x: np.ndarray, coords: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    out = np.zeros(coords.shape[0])
    flat = x.reshape(-1)
    for n, k in enumerate(coords):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out


def _check_tensor(f, x: np.ndarray, analytic: np.ndarray,
                  rng: np.random.Generator) -> tuple[float, int]:
    """Compare analytic gradient for one tensor against central differences."""
    if x.size <= SUBSAMPLE_LIMIT:
        fd = finite_difference_gradient(f, x, FD_STEP)
        return relative_error(analytic, fd), x.size
    coords = rng.choice(x.size, size=SUBSAMPLE_COORDS, replace=False)
    fd = _fd_subset(f, x, coords)
    return relative_error(analytic.reshape(-1)[coords], fd), coords.size


def _batch_size(seed: int) -> int:
    return 4 if seed % 2 == 0 else 8


def _random_attr_pairs(rng: np.random.Generator, b: int, q: int):
    caps, imgs = [], []
    for _ in range(b):
        k = int(rng.integers(2, 6))
        idx = rng.choice(q, size=k, replace=False)
        img = AttributeSet.from_indices(idx, q)
        m = int(rng.integers(1, k + 1))
        cap = AttributeSet.from_indices(rng.choice(np.sort(idx), size=m, replace=False), q)
        caps.append(cap)
        imgs.append(img)
    return caps, imgs


def _check_ac(seed: int) -> tuple[float, int]:
    rng = child_rng(seed, "gradcheck/ac")
    b, q = _batch_size(seed), 12
    li = rng.standard_normal((b, q))
    lt = rng.standard_normal((b, q))
    bits = (rng.random((b, q)) < 0.4).astype(np.float64)
    res = losses.attribute_classification_loss(li, lt, bits)
    worst, checked = 0.0, 0
    for arr, key in ((li, "logits_img"), (lt, "logits_txt")):
        other = lt if key == "logits_img" else li

        def f(x, _key=key):
            a = x if _key == "logits_img" else other
            t = other if _key == "logits_img" else x
            return losses.attribute_classification_loss(a, t, bits).value

        err, n = _check_tensor(f, arr, res.grads[key], rng)
        worst, checked = max(worst, err), checked + n
    return worst, checked


def _check_irm(seed: int) -> tuple[float, int]:
    rng = child_rng(seed, "gradcheck/irm")
    b = _batch_size(seed)
    sims = rng.uniform(-1, 1, size=(b, b))
    caps, imgs = _random_attr_pairs(rng, b, 12)
    q = losses.inclusion_targets(caps, imgs)
    tau, eps = 0.07, 1e-8

    def f(s):
        p_t2i, p_i2t = losses.matching_probabilities(s, tau)
        return losses.irm_loss(p_t2i, p_i2t, q, eps, tau).value

    p_t2i, p_i2t = losses.matching_probabilities(sims, tau)
    res = losses.irm_loss(p_t2i, p_i2t, q, eps, tau)
    return _check_tensor(f, sims, res.grads["sims"], rng)


def _check_fitc(seed: int) -> tuple[float, int]:
    rng = child_rng(seed, "gradcheck/fitc")
    b = _batch_size(seed)
    sims = rng.uniform(-1, 1, size=(b, b))
    tags = [int(t) for t in rng.integers(0, 3, size=b)]
    y = losses.tag_targets(tags)
    tau = float(rng.uniform(0.05, 0.2))
    res = losses.fitc_loss(sims, tau, y)

    err_s, n_s = _check_tensor(lambda s: losses.fitc_loss(s, tau, y).value,
                               sims, res.grads["sims"], rng)
    tau_arr = np.array([tau])
    err_t, n_t = _check_tensor(lambda t: losses.fitc_loss(sims, float(t[0]), y).value,
                               tau_arr, res.grads["tau_fitc"], rng)
    return max(err_s, err_t), n_s + n_t


def _check_fitm(seed: int) -> tuple[float, int]:
    rng = child_rng(seed, "gradcheck/fitm")
    b = _batch_size(seed)
    logits = rng.standard_normal((3 * b, 2))
    labels = np.array(([1, 0, 0] * b), dtype=np.intp)
    res = losses.fitm_loss(logits, labels)
    return _check_tensor(lambda x: losses.fitm_loss(x, labels).value,
                         logits, res.grads["logits"], rng)


def _check_irr(seed: int) -> tuple[float, int]:
    rng = child_rng(seed, "gradcheck/irr")
    b = _batch_size(seed)
    vocab = build_shared_vocab()
    params = model.init_pedestrian_params(len(vocab), 12, seed)
    mask_id = vocab.mask_id
    masked, targets = [], []
    for _ in range(b):
        ids = [0, 1, 2, int(rng.integers(4, len(vocab)))]
        targets.append(ids[3])
        ids[3] = mask_id
        masked.append(ids)
    f_msk = _random_unit_rows(rng, b)
    f_img = _random_unit_rows(rng, b)
    res = losses.irr_proxy_loss(masked, mask_id, targets, f_msk, f_img, params)

    worst, checked = 0.0, 0
    for key, arr in (("f_txt_masked", f_msk), ("f_img", f_img)):
        def f(x, _key=key):
            a = x if _key == "f_txt_masked" else f_msk
            c = x if _key == "f_img" else f_img
            return losses.irr_proxy_loss(masked, mask_id, targets, a, c, params).value
        err, n = _check_tensor(f, arr, res.grads[key], rng)
        worst, checked = max(worst, err), checked + n
    for key in ("irr_w1", "irr_b1", "irr_w2", "irr_b2"):
        def f(x, _key=key):
            return losses.irr_proxy_loss(masked, mask_id, targets,
                                         f_msk, f_img, params).value
        err, n = _check_tensor(f, params[key], res.grads[key], rng)
        worst, checked = max(worst, err), checked + n
    return worst, checked


def _random_unit_rows(rng: np.random.Generator, b: int) -> np.ndarray:
    m = rng.standard_normal((b, model.EMBED_DIM))
    return m / np.sqrt((m * m).sum(axis=1, keepdims=True))


def make_pedestrian_check_batch(seed: int, b: int):
    rng = child_rng(seed, "gradcheck/ped-batch")
    attr_vocab = AttributeVocabulary()
    vocab = build_shared_vocab(attr_vocab)
    caps, imgs = _random_attr_pairs(rng, b, attr_vocab.q)
    samples = []
    for i, (cap, img) in enumerate(zip(caps, imgs)):
        words = caption_from_attributes(cap, attr_vocab)
        samples.append(PedestrianSample(
            id=i, image_features=rng.standard_normal(model.IMAGE_INPUT),
            caption=" ".join(words), caption_tokens=vocab.encode(words),
            image_attributes=img, caption_attributes=cap))
    batch = losses.make_pedestrian_batch(samples, vocab,
                                         child_rng(seed, "gradcheck/ped-mask"))
    params = model.init_pedestrian_params(len(vocab), attr_vocab.q, seed)
    return params, batch


def make_vehicle_check_batch(seed: int, b: int):
    rng = child_rng(seed, "gradcheck/veh-batch")
    vocab = build_shared_vocab()
    tokens, tags = [], []
    for _ in range(b):
        tag = (int(rng.integers(len(DEFAULT_PALETTE.entries))),
               int(rng.integers(len(DEFAULT_VEHICLE_TYPES))))
        words = vehicle_caption(tag, DEFAULT_PALETTE, DEFAULT_VEHICLE_TYPES)
        tokens.append(vocab.encode(words))
        tags.append(tag)
    batch = losses.VehicleBatch(tokens=tokens,
                                features=rng.random((b, model.IMAGE_INPUT)),
                                tags=tags)
    params = model.init_vehicle_params(len(vocab), seed)
    return params, batch


def _check_objective(seed: int, task: str) -> tuple[float, int]:
    rng = child_rng(seed, f"gradcheck/{task}-coords")
    b = _batch_size(seed)
    cfg = losses.LossConfig()
    if task == "pedestrian":
        params, batch = make_pedestrian_check_batch(seed, b)
        res = losses.pedestrian_objective(params, batch, cfg)

        def value() -> float:
            return losses.pedestrian_objective(params, batch, cfg).value
    else:
        params, batch = make_vehicle_check_batch(seed, b)
        negatives = losses.mine_vehicle_negatives(
            params, batch, child_rng(seed, "gradcheck/mine"))
        res = losses.vehicle_objective(params, batch, cfg, negatives=negatives)

        def value() -> float:
            return losses.vehicle_objective(params, batch, cfg,
                                            negatives=negatives).value

    worst, checked = 0.0, 0
    for name in sorted(params):
        arr = params[name]

        def f(_x, _name=name):
            # _x is the same array object mutated in place by the FD driver
            return value()

        err, n = _check_tensor(f, arr, res.grads[name], rng)
        worst, checked = max(worst, err), checked + n
    return worst, checked


_CHECKS = {
    "ac": _check_ac,
    "irm": _check_irm,
    "irr": _check_irr,
    "fitc": _check_fitc,
    "fitm": _check_fitm,
    "pedestrian": lambda seed: _check_objective(seed, "pedestrian"),
    "vehicle": lambda seed: _check_objective(seed, "vehicle"),
}


def run_gradcheck(names, seeds: int) -> dict:
    """Run FD verification for the named losses over `seeds` random batches."""
    results = {}
    for name in names:
        if name not in _CHECKS:
            raise ValueError(f"unknown loss {name!r}; choose from {LOSS_NAMES}")
        worst, checked = 0.0, 0
        for seed in range(seeds):
            err, n = _CHECKS[name](seed)
            worst, checked = max(worst, err), checked + n
        results[name] = {"max_rel_err": worst, "coords_checked": checked,
                         "seeds": seeds}
    return results
