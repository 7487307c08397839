"""Training objectives for both branches, with hand-derived gradients.

Pedestrian branch: masked-attribute prediction over fused features,
shared-head multi-label attribute classification, and soft-target KL
matching that treats caption-included-in-image pairs as positives.
Vehicle branch: tag-aware contrastive loss with a learnable temperature,
plus matched/mismatched classification over mined hard negatives that
never share the anchor's tag.

Every loss returns a LossResult carrying the scalar value and gradients
with respect to everything it touches; the two *_objective functions
push those gradients through the encoders into parameter space.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model
from .datagen import AttributeSet
from .errors import (ConfigInvalid, DimensionMismatch, EmptyBatch, NoInclusionRow,
                     NoMaskPresent, NonPositiveTemperature, ShapeMismatch)
from .numerics import cosine_similarity_matrix, stable_softmax_rows


@dataclass(frozen=True)
class LossConfig:
    tau_irm: float = 0.07          # fixed temperature
    tau_fitc_init: float = 0.07    # learnable, updated by the trainer
    tau_fitc_floor: float = 1e-3
    eps: float = 1e-8
    w_irr: float = 1.0
    w_ac: float = 1.0
    w_irm: float = 1.0
    w_fitc: float = 1.0
    w_fitm: float = 1.0
    use_inclusion_targets: bool = True  # False: one-hot ablation arm

    def validate(self) -> None:
        if self.tau_irm <= 0 or self.tau_fitc_init <= 0 or self.tau_fitc_floor <= 0:
            raise ConfigInvalid("temperatures must be > 0")
        if self.eps <= 0:
            raise ConfigInvalid("eps must be > 0")


@dataclass
class TargetDistribution:
    """Row-stochastic target rows; kind is 'inclusion' or 'tag'."""

    rows: np.ndarray
    kind: str

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise DimensionMismatch("targets must be a 2-d matrix")
        if np.any(rows < 0):
            raise ValueError("target entries must be nonnegative")
        sums = rows.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-12):
            raise ValueError("target rows must sum to 1")
        self.rows = rows


@dataclass
class LossResult:
    value: float
    grads: dict
    components: dict = field(default_factory=dict)


def attribute_classification_loss(logits_img: np.ndarray, logits_txt: np.ndarray,
                                  attr_bits: np.ndarray) -> LossResult:
    """Per-attribute sigmoid BCE averaged over batch and attributes,
    then averaged across the two modalities."""
    li = np.asarray(logits_img, dtype=np.float64)
    lt = np.asarray(logits_txt, dtype=np.float64)
    a = np.asarray(attr_bits, dtype=np.float64)
    if li.shape != lt.shape or li.shape != a.shape or li.ndim != 2:
        raise DimensionMismatch(
            f"shapes disagree: {li.shape}, {lt.shape}, labels {a.shape}")
    n = a.size

    def bce(z):
        # stable form: max(z,0) - z*a + log(1 + exp(-|z|))
        value = np.maximum(z, 0.0) - z * a + np.log1p(np.exp(-np.abs(z)))
        sigma = 1.0 / (1.0 + np.exp(-z))
        return value.sum() / n, (sigma - a) / n

    ce_img, d_img = bce(li)
    ce_txt, d_txt = bce(lt)
    value = 0.5 * (ce_img + ce_txt)
    return LossResult(value=value,
                      grads={"logits_img": 0.5 * d_img, "logits_txt": 0.5 * d_txt})


def matching_probabilities(sims: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-softmax matching distributions in both directions.

    p_t2i[i] distributes text i over images; p_i2t[j] distributes image j
    over texts.
    """
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {tau!r}")
    sims = np.asarray(sims, dtype=np.float64)
    return stable_softmax_rows(sims, tau), stable_softmax_rows(sims.T, tau)


def inclusion_targets(text_attrs, image_attrs) -> TargetDistribution:
    """Row-normalized inclusion indicators: text i's attributes within image j's."""
    b = len(text_attrs)
    if len(image_attrs) != b:
        raise DimensionMismatch("attribute lists differ in length")
    a = np.zeros((b, b))
    for i, t in enumerate(text_attrs):
        for j, im in enumerate(image_attrs):
            if t.is_subset(im):
                a[i, j] = 1.0
    sums = a.sum(axis=1)
    empty = np.where(sums == 0)[0]
    if empty.size:
        raise NoInclusionRow(f"rows without any inclusion pair: {empty.tolist()}")
    return TargetDistribution(rows=a / sums[:, None], kind="inclusion")


def one_hot_targets(batch_size: int) -> TargetDistribution:
    """Diagonal targets for the ablation arm (each pair matches itself only)."""
    return tag_targets(list(range(batch_size)))


def tag_targets(tags) -> TargetDistribution:
    """y[i, j] = 1/K_i when tag_j equals tag_i; K counts the anchor itself."""
    b = len(tags)
    y = np.zeros((b, b))
    for i in range(b):
        same = [j for j in range(b) if tags[j] == tags[i]]
        y[i, same] = 1.0 / len(same)
    return TargetDistribution(rows=y, kind="tag")


def _kl_value_and_logit_grad(p: np.ndarray, q: np.ndarray,
                             eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-row KL(p_i || q_i) with the 1/B factor inside, and d/dlogits.

    p must be a row-softmax output; the gradient returned is with respect
    to the logits that produced p (softmax Jacobian applied).
    """
    b = p.shape[0]
    log_ratio = np.log(p) - np.log(q + eps)
    kl_rows = (p * log_ratio).sum(axis=1) / b
    g = (log_ratio + 1.0) / b               # dKL_i/dp_ij
    inner = (p * g).sum(axis=1, keepdims=True)
    d_logits = p * (g - inner)
    return kl_rows, d_logits


def irm_loss(p_t2i: np.ndarray, p_i2t: np.ndarray, q: TargetDistribution,
             eps: float, tau: float) -> LossResult:
    """Mean over the batch of KL(p_i2t_i || q_i) + KL(p_t2i_i || q_i).

    Each KL carries an additional 1/B factor, as defined. The gradient is
    with respect to the raw similarity matrix, through both softmaxes.
    """
    p_t2i = np.asarray(p_t2i, dtype=np.float64)
    p_i2t = np.asarray(p_i2t, dtype=np.float64)
    rows = q.rows
    if p_t2i.shape != rows.shape or p_i2t.shape != rows.shape:
        raise ShapeMismatch(
            f"probability/target shapes disagree: {p_t2i.shape}, {p_i2t.shape}, {rows.shape}")
    b = rows.shape[0]
    kl_t2i, g_t2i = _kl_value_and_logit_grad(p_t2i, rows, eps)
    kl_i2t, g_i2t = _kl_value_and_logit_grad(p_i2t, rows, eps)
    value = float((kl_i2t + kl_t2i).mean())
    # logits are sims/tau for t2i and sims.T/tau for i2t; outer mean adds 1/B
    d_sims = (g_t2i + g_i2t.T) / (b * tau)
    return LossResult(value=value, grads={"sims": d_sims})


def irr_proxy_loss(masked_token_lists, mask_token_id: int, target_ids,
                   f_txt_masked: np.ndarray, f_img: np.ndarray,
                   params: model.Params) -> LossResult:
    """Masked-attribute prediction from fused masked-text + image features."""
    for tokens in masked_token_lists:
        if sum(1 for t in tokens if t == mask_token_id) != 1:
            raise NoMaskPresent(
                "each caption must contain exactly one masked attribute token")
    targets = np.asarray(target_ids, dtype=np.intp)
    logits, cache = model.fusion_forward(params, "irr", f_txt_masked, f_img)
    b = logits.shape[0]
    p = stable_softmax_rows(logits)
    value = float(-np.log(p[np.arange(b), targets]).mean())
    d_logits = p.copy()
    d_logits[np.arange(b), targets] -= 1.0
    d_logits /= b
    head_grads, d_txt, d_img = model.fusion_backward(params, "irr", cache, d_logits)
    grads = dict(head_grads)
    grads["f_txt_masked"] = d_txt
    grads["f_img"] = d_img
    return LossResult(value=value, grads=grads)


def fitc_loss(sims: np.ndarray, tau_fitc: float, y: TargetDistribution) -> LossResult:
    """Tag-aware contrastive cross-entropy in both directions.

    Returns gradients with respect to the similarity matrix and to the
    learnable temperature.
    """
    if not tau_fitc > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {tau_fitc!r}")
    sims = np.asarray(sims, dtype=np.float64)
    rows = y.rows
    if sims.shape != rows.shape:
        raise ShapeMismatch(f"sims {sims.shape} vs targets {rows.shape}")
    b = sims.shape[0]
    p_t2i = stable_softmax_rows(sims, tau_fitc)
    p_i2t = stable_softmax_rows(sims.T, tau_fitc)
    h_t2i = -(rows * np.log(p_t2i)).sum(axis=1)
    h_i2t = -(rows * np.log(p_i2t)).sum(axis=1)
    value = float(0.5 * (h_i2t + h_t2i).mean())
    scale = 0.5 / b
    d_sims = scale * ((p_t2i - rows) + (p_i2t - rows).T) / tau_fitc
    d_tau = scale * (-1.0 / tau_fitc ** 2) * (
        ((p_t2i - rows) * sims).sum() + ((p_i2t - rows) * sims.T).sum())
    return LossResult(value=value,
                      grads={"sims": d_sims, "tau_fitc": np.array([d_tau])})


def sample_hard_negatives(p: np.ndarray, tags, rng: np.random.Generator
                          ) -> tuple[list, list[int]]:
    """Per-anchor negative index, sampled proportionally to p over
    different-tag candidates.

    Anchors whose every other item shares their tag are skipped and
    reported in the second return value.
    """
    p = np.asarray(p, dtype=np.float64)
    b = p.shape[0]
    if b < 2:
        raise ShapeMismatch("need a batch of at least 2 items")
    negatives: list = []
    skipped: list[int] = []
    for i in range(b):
        eligible = np.array([j for j in range(b) if tags[j] != tags[i]], dtype=np.intp)
        if eligible.size == 0:
            negatives.append(None)
            skipped.append(i)
            continue
        weights = p[i, eligible]
        total = weights.sum()
        if total <= 0:  # softmax outputs are positive; guard anyway
            probs = np.full(eligible.size, 1.0 / eligible.size)
        else:
            probs = weights / total
        u = rng.random()
        idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
        idx = min(idx, eligible.size - 1)
        negatives.append(int(eligible[idx]))
    return negatives, skipped


def fitm_loss(logits: np.ndarray, labels) -> LossResult:
    """Two-class softmax cross-entropy over fused matched/mismatched pairs."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise EmptyBatch("no pairs to classify")
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ShapeMismatch(f"expected Px2 logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeMismatch("labels do not match logits")
    n = logits.shape[0]
    p = stable_softmax_rows(logits)
    value = float(-np.log(p[np.arange(n), labels]).mean())
    d_logits = p.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    return LossResult(value=value, grads={"logits": d_logits})


# ---------------------------------------------------------------------------
# batch containers and branch objectives


@dataclass
class PedestrianBatch:
    tokens: list
    masked_tokens: list
    mask_targets: np.ndarray
    features: np.ndarray
    caption_attrs: list
    image_attrs: list
    attr_bits: np.ndarray
    mask_token_id: int


@dataclass
class VehicleBatch:
    tokens: list
    features: np.ndarray
    tags: list


def make_pedestrian_batch(samples, vocab, rng: np.random.Generator) -> PedestrianBatch:
    """Assemble arrays and mask one attribute token per caption."""
    structural = {vocab.encode([w])[0] for w in ("a", "man", "wearing", "and")}
    mask_id = vocab.mask_id
    tokens, masked, targets = [], [], []
    for s in samples:
        ids = list(s.caption_tokens)
        positions = [k for k, t in enumerate(ids) if t not in structural and t != mask_id]
        pos = positions[int(rng.integers(len(positions)))]
        m = list(ids)
        targets.append(m[pos])
        m[pos] = mask_id
        tokens.append(ids)
        masked.append(m)
    q = samples[0].image_attributes.q
    return PedestrianBatch(
        tokens=tokens, masked_tokens=masked,
        mask_targets=np.asarray(targets, dtype=np.intp),
        features=np.stack([s.image_features for s in samples]),
        caption_attrs=[s.caption_attributes for s in samples],
        image_attrs=[s.image_attributes for s in samples],
        attr_bits=np.stack([s.image_attributes.to_float_bits() for s in samples]),
        mask_token_id=mask_id,
    )


def pedestrian_objective(params: model.Params, batch: PedestrianBatch,
                         cfg: LossConfig) -> LossResult:
    """Masked-attribute + attribute-classification + inclusion-matching
    objective, with gradients for every parameter."""
    f_txt, txt_cache = model.encode_text_batch(params, batch.tokens)
    f_img, img_cache = model.encode_image_batch(params, batch.features)
    f_msk, msk_cache = model.encode_text_batch(params, batch.masked_tokens)

    la_txt, at_cache = model.attribute_logits(f_txt, params)
    la_img, ai_cache = model.attribute_logits(f_img, params)
    ac = attribute_classification_loss(la_img, la_txt, batch.attr_bits)

    sims = cosine_similarity_matrix(f_txt, f_img)
    p_t2i, p_i2t = matching_probabilities(sims, cfg.tau_irm)
    if cfg.use_inclusion_targets:
        q = inclusion_targets(batch.caption_attrs, batch.image_attrs)
    else:
        q = one_hot_targets(len(batch.tokens))
    irm = irm_loss(p_t2i, p_i2t, q, cfg.eps, cfg.tau_irm)

    irr = irr_proxy_loss(batch.masked_tokens, batch.mask_token_id,
                         batch.mask_targets, f_msk, f_img, params)

    value = cfg.w_irr * irr.value + cfg.w_ac * ac.value + cfg.w_irm * irm.value

    d_sims = cfg.w_irm * irm.grads["sims"]
    d_f_txt = d_sims @ f_img
    d_f_img = d_sims.T @ f_txt

    at_grads, d_txt_ac = model.attribute_head_backward(
        params, at_cache, cfg.w_ac * ac.grads["logits_txt"])
    ai_grads, d_img_ac = model.attribute_head_backward(
        params, ai_cache, cfg.w_ac * ac.grads["logits_img"])
    d_f_txt = d_f_txt + d_txt_ac
    d_f_img = d_f_img + d_img_ac + cfg.w_irr * irr.grads["f_img"]
    d_f_msk = cfg.w_irr * irr.grads["f_txt_masked"]

    total: dict = {}
    model.accumulate(total, at_grads)
    model.accumulate(total, ai_grads)
    model.accumulate(total, {k: irr.grads[k] for k in
                             ("irr_w1", "irr_b1", "irr_w2", "irr_b2")}, cfg.w_irr)
    model.accumulate(total, model.text_backward(params, txt_cache, d_f_txt))
    model.accumulate(total, model.text_backward(params, msk_cache, d_f_msk))
    model.accumulate(total, model.image_backward(params, img_cache, d_f_img))

    return LossResult(value=value, grads=total,
                      components={"irr": irr.value, "ac": ac.value, "irm": irm.value})


def mine_vehicle_negatives(params: model.Params, batch: VehicleBatch,
                           rng: np.random.Generator) -> tuple[list, list, list[int]]:
    """Sample an image negative and a text negative per anchor from the
    current matching probabilities (no gradient flows through the choice)."""
    f_txt, _ = model.encode_text_batch(params, batch.tokens)
    f_img, _ = model.encode_image_batch(params, batch.features)
    sims = cosine_similarity_matrix(f_txt, f_img)
    tau = float(params["tau_fitc"][0])
    p_t2i, p_i2t = matching_probabilities(sims, tau)
    neg_images, skipped = sample_hard_negatives(p_t2i, batch.tags, rng)
    neg_texts, _ = sample_hard_negatives(p_i2t, batch.tags, rng)
    return neg_images, neg_texts, skipped


def vehicle_objective(params: model.Params, batch: VehicleBatch, cfg: LossConfig,
                      rng: np.random.Generator | None = None,
                      negatives: tuple | None = None) -> LossResult:
    """Tag-aware contrastive + mined matched/mismatched objective.

    Pass either an rng (negatives are mined here) or a fixed negatives
    triple from mine_vehicle_negatives.
    """
    if (rng is None) == (negatives is None):
        raise ValueError("pass exactly one of rng or negatives")
    f_txt, txt_cache = model.encode_text_batch(params, batch.tokens)
    f_img, img_cache = model.encode_image_batch(params, batch.features)
    sims = cosine_similarity_matrix(f_txt, f_img)
    tau = float(params["tau_fitc"][0])

    y = tag_targets(batch.tags)
    fitc = fitc_loss(sims, tau, y)

    if negatives is None:
        p_t2i, p_i2t = matching_probabilities(sims, tau)
        neg_images, skipped = sample_hard_negatives(p_t2i, batch.tags, rng)
        neg_texts, _ = sample_hard_negatives(p_i2t, batch.tags, rng)
    else:
        neg_images, neg_texts, skipped = negatives

    kept = [i for i in range(len(batch.tags)) if neg_images[i] is not None]
    if not kept:
        raise EmptyBatch("every anchor was skipped by negative mining")
    txt_rows, img_rows, labels = [], [], []
    for i in kept:
        txt_rows += [i, i, neg_texts[i]]
        img_rows += [i, neg_images[i], i]
        labels += [1, 0, 0]
    a = f_txt[txt_rows]
    b = f_img[img_rows]
    logits, fuse_cache = model.fusion_forward(params, "itm", a, b)
    fitm = fitm_loss(logits, labels)

    value = cfg.w_fitc * fitc.value + cfg.w_fitm * fitm.value

    head_grads, d_a, d_b = model.fusion_backward(
        params, "itm", fuse_cache, cfg.w_fitm * fitm.grads["logits"])
    d_f_txt = np.zeros_like(f_txt)
    d_f_img = np.zeros_like(f_img)
    np.add.at(d_f_txt, txt_rows, d_a)
    np.add.at(d_f_img, img_rows, d_b)

    d_sims = cfg.w_fitc * fitc.grads["sims"]
    d_f_txt += d_sims @ f_img
    d_f_img += d_sims.T @ f_txt

    total: dict = {"tau_fitc": cfg.w_fitc * fitc.grads["tau_fitc"]}
    model.accumulate(total, head_grads)
    model.accumulate(total, model.text_backward(params, txt_cache, d_f_txt))
    model.accumulate(total, model.image_backward(params, img_cache, d_f_img))

    return LossResult(value=value, grads=total,
                      components={"fitc": fitc.value, "fitm": fitm.value,
                                  "skipped_anchors": float(len(skipped))})
