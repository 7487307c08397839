"""Query routing between the pedestrian and vehicle branches.

Rule matching over disjoint keyword sets decides first; when a caption
hits both sets or neither, a logistic bag-of-words classifier breaks the
tie (threshold 0.5, exact ties go to pedestrian). Gallery images are
routed by a logistic classifier over raw encoder-input features.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import (DEFAULT_ATTRIBUTE_NAMES, DEFAULT_VEHICLE_TYPES,
                      AttributeVocabulary)
from .errors import EmptyQuery, SingleClassData, UntrainedClassifier
from .numerics import child_rng

PEDESTRIAN = "pedestrian"
VEHICLE = "vehicle"

GD_MAX_EPOCHS = 500
GD_TOL = 1e-9


def _attribute_words() -> tuple[str, ...]:
    vocab = AttributeVocabulary(names=DEFAULT_ATTRIBUTE_NAMES)
    words: list[str] = []
    for k in range(vocab.q):
        for w in vocab.phrase(k).split():
            if w not in words:
                words.append(w)
    return tuple(words)


@dataclass(frozen=True)
class RuleSet:
    pedestrian_keywords: frozenset = field(
        default_factory=lambda: frozenset(("man", "woman", "person", "wearing")
                                          + _attribute_words()))
    vehicle_keywords: frozenset = field(
        default_factory=lambda: frozenset(("car", "vehicle") + DEFAULT_VEHICLE_TYPES))

    def __post_init__(self):
        if self.pedestrian_keywords & self.vehicle_keywords:
            raise ValueError("keyword sets must be disjoint")


@dataclass(frozen=True)
class RouteDecision:
    domain: str
    source: str  # "rule" | "classifier"
    confidence: float

    def __post_init__(self):
        if self.source == "rule" and self.confidence != 1.0:
            raise ValueError("rule decisions carry confidence 1")


@dataclass
class LogisticClassifier:
    """Binary logistic model; class 1 is the vehicle domain."""

    weights: np.ndarray
    bias: float

    def score(self, x: np.ndarray) -> float:
        z = float(np.dot(self.weights, x) + self.bias)
        return 1.0 / (1.0 + np.exp(-z))


def _token_counts(tokens, vocab_size: int) -> np.ndarray:
    x = np.zeros(vocab_size)
    np.add.at(x, np.asarray(list(tokens), dtype=np.intp), 1.0)
    return x


def _train_logistic(features: np.ndarray, labels: np.ndarray, seed: int,
                    lr: float = 0.5) -> LogisticClassifier:
    classes = set(int(v) for v in labels)
    if len(classes) < 2:
        raise SingleClassData(f"need both classes, got {sorted(classes)}")
    x = np.asarray(features, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    n, d = x.shape
    rng = child_rng(seed, "router/init")
    w = rng.uniform(-0.01, 0.01, size=d)
    b = float(rng.uniform(-0.01, 0.01))
    prev = np.inf
    for _ in range(GD_MAX_EPOCHS):
        z = x @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        # mean logistic loss, stable form
        loss = float(np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))))
        err = (p - t) / n
        w = w - lr * (x.T @ err)
        b = b - lr * float(err.sum())
        if abs(prev - loss) < GD_TOL:
            break
        prev = loss
    return LogisticClassifier(weights=w, bias=b)


def train_router_classifier(token_lists, labels, vocab_size: int,
                            seed: int = 0) -> LogisticClassifier:
    """Logistic regression over bag-of-words counts, full-batch gradient
    descent to convergence; deterministic given the seed."""
    features = np.stack([_token_counts(t, vocab_size) for t in token_lists])
    return _train_logistic(features, np.asarray(labels), seed)


def train_image_router(features, labels, seed: int = 0) -> LogisticClassifier:
    """Logistic classifier over raw image features (pre-encoder)."""
    return _train_logistic(np.asarray(features, dtype=np.float64),
                           np.asarray(labels), seed)


def classify_text(tokens, classifier: LogisticClassifier) -> RouteDecision:
    """Classifier-only decision (the rule-miss fallback path)."""
    x = _token_counts(tokens, classifier.weights.shape[0])
    p = classifier.score(x)
    domain = VEHICLE if p > 0.5 else PEDESTRIAN  # exact tie -> pedestrian
    return RouteDecision(domain=domain, source="classifier",
                         confidence=max(p, 1.0 - p))


def route_text(tokens, rules: RuleSet, classifier: LogisticClassifier | None,
               vocab) -> RouteDecision:
    """Rule-first routing; the classifier only sees ambiguous captions."""
    tokens = list(tokens)
    if not tokens:
        raise EmptyQuery("cannot route an empty caption")
    words = set(vocab.decode(tokens))
    ped_hit = bool(words & rules.pedestrian_keywords)
    veh_hit = bool(words & rules.vehicle_keywords)
    if ped_hit != veh_hit:
        domain = PEDESTRIAN if ped_hit else VEHICLE
        return RouteDecision(domain=domain, source="rule", confidence=1.0)
    if classifier is None:
        raise UntrainedClassifier("ambiguous caption and no classifier available")
    return classify_text(tokens, classifier)


def route_image(features: np.ndarray, classifier: LogisticClassifier | None) -> RouteDecision:
    if classifier is None:
        raise UntrainedClassifier("image router has not been trained")
    p = classifier.score(np.asarray(features, dtype=np.float64))
    domain = VEHICLE if p > 0.5 else PEDESTRIAN
    return RouteDecision(domain=domain, source="classifier",
                         confidence=max(p, 1.0 - p))
