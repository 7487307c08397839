"""Seeded synthetic datasets for the pedestrian and vehicle branches.

Pedestrian samples are attribute-bearing feature vectors paired with
templated captions whose attribute set is always included in the image's
attribute set. Vehicle samples are small RGB rasters with a dominant body
color and a (color, type) tag; captions follow "a <color> <type>".
Generation is a pure function of (config, seed).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment
from .augment import DEFAULT_PALETTE, Palette
from .errors import (ConfigInvalid, DatasetIntegrityError, EmptyAttributeSet,
                     UnknownToken)
from .numerics import child_rng

DEFAULT_ATTRIBUTE_NAMES = (
    "glasses", "long-sleeves", "short-sleeves", "hat", "backpack", "skirt",
    "trousers", "coat", "mask", "handbag", "boots", "umbrella",
)
DEFAULT_VEHICLE_TYPES = ("audi", "bmw", "truck", "van", "suv", "sedan")
STRUCTURAL_TOKENS = ("a", "man", "wearing", "and")
MASK_TOKEN = "[MASK]"

PED_FEATURE_DIM = 48
DATASET_FORMAT = "tirlab-dataset-v1"


@dataclass(frozen=True)
class AttributeVocabulary:
    """Ordered attribute identifiers; index of a name is stable."""

    names: tuple[str, ...] = DEFAULT_ATTRIBUTE_NAMES

    def __post_init__(self):
        if len(self.names) < 2:
            raise ConfigInvalid("need at least 2 attributes")
        if len(set(self.names)) != len(self.names):
            raise ConfigInvalid("attribute names must be unique")

    @property
    def q(self) -> int:
        return len(self.names)

    def phrase(self, index: int) -> str:
        """Caption phrase for one attribute ('long-sleeves' -> 'long sleeves')."""
        return self.names[index].replace("-", " ")


@dataclass(frozen=True)
class AttributeSet:
    """Bitset over a q-attribute vocabulary."""

    bits: int
    q: int

    def __post_init__(self):
        if self.bits < 0 or self.bits >> self.q:
            raise ValueError(f"bits {self.bits:#x} out of range for q={self.q}")

    @classmethod
    def from_indices(cls, indices, q: int) -> "AttributeSet":
        bits = 0
        for k in indices:
            bits |= 1 << int(k)
        return cls(bits=bits, q=q)

    @classmethod
    def from_hex(cls, text: str, q: int) -> "AttributeSet":
        return cls(bits=int(text, 16), q=q)

    def to_hex(self) -> str:
        return format(self.bits, "#x")

    def indices(self) -> tuple[int, ...]:
        return tuple(k for k in range(self.q) if self.bits >> k & 1)

    def is_subset(self, other: "AttributeSet") -> bool:
        return self.bits & ~other.bits == 0

    def to_float_bits(self) -> np.ndarray:
        return np.array([(self.bits >> k) & 1 for k in range(self.q)], dtype=np.float64)

    def __len__(self) -> int:
        return bin(self.bits).count("1")

    def __bool__(self) -> bool:
        return self.bits != 0


@dataclass
class Vocabulary:
    """Closed token vocabulary shared by both branches."""

    tokens: tuple[str, ...]
    _ids: dict = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigInvalid("duplicate tokens in vocabulary")
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def mask_id(self) -> int:
        return self._ids[MASK_TOKEN]

    def encode(self, words) -> list[int]:
        try:
            return [self._ids[w] for w in words]
        except KeyError as exc:
            raise UnknownToken(f"token {exc.args[0]!r} not in vocabulary") from exc

    def decode(self, ids) -> list[str]:
        try:
            return [self.tokens[i] for i in ids]
        except IndexError as exc:
            raise UnknownToken(f"token id out of range: {ids!r}") from exc


def build_shared_vocab(attr_vocab: AttributeVocabulary = AttributeVocabulary(),
                       palette: Palette = DEFAULT_PALETTE,
                       vehicle_types: tuple[str, ...] = DEFAULT_VEHICLE_TYPES) -> Vocabulary:
    """Union of structural words, attribute phrases, mask, colors and types."""
    tokens: list[str] = list(STRUCTURAL_TOKENS)
    for k in range(attr_vocab.q):
        for word in attr_vocab.phrase(k).split():
            if word not in tokens:
                tokens.append(word)
    tokens.append(MASK_TOKEN)
    for name in palette.names:
        if name not in tokens:
            tokens.append(name)
    for name in vehicle_types:
        if name not in tokens:
            tokens.append(name)
    return Vocabulary(tokens=tuple(tokens))


def caption_from_attributes(attrs: AttributeSet, vocab: AttributeVocabulary) -> list[str]:
    """Templated caption tokens, attributes joined in vocabulary order."""
    if not attrs:
        raise EmptyAttributeSet("caption needs at least one attribute")
    words = ["a", "man", "wearing"]
    for n, k in enumerate(attrs.indices()):
        if n > 0:
            words.append("and")
        words.extend(vocab.phrase(k).split())
    return words


def vehicle_caption(tag: tuple[int, int], palette: Palette,
                    vehicle_types: tuple[str, ...]) -> list[str]:
    color_id, type_id = tag
    return ["a", palette.name_of(color_id), vehicle_types[type_id]]


@dataclass
class PedestrianSample:
    id: int
    image_features: np.ndarray
    caption: str
    caption_tokens: list[int]
    image_attributes: AttributeSet
    caption_attributes: AttributeSet


@dataclass
class VehicleSample:
    id: int
    image: np.ndarray  # (side, side, 3) uint8
    caption: str
    caption_tokens: list[int]
    tag: tuple[int, int]
    true_body_color: tuple[int, int, int]


@dataclass
class Query:
    id: int
    caption: str
    tokens: list[int]
    gt_ids: list[int]
    domain: str
    strict_subset: bool = False
    confusable: bool = False


@dataclass
class DatasetSplit:
    task: str
    train: list
    test_queries: list[Query]
    test_gallery: list
    meta: dict


@dataclass(frozen=True)
class PedestrianDataConfig:
    n_train: int = 512
    n_test: int = 128
    min_attrs: int = 2
    max_attrs: int = 5
    strict_subset_fraction: float = 0.3
    noise_sigma: float = 0.1

    def validate(self) -> None:
        if self.n_train < 8 or self.n_test < 8:
            raise ConfigInvalid("dataset sizes must be >= 8")
        if not 1 <= self.min_attrs <= self.max_attrs <= len(DEFAULT_ATTRIBUTE_NAMES):
            raise ConfigInvalid("attribute count range invalid")
        if not 0.0 <= self.strict_subset_fraction <= 1.0:
            raise ConfigInvalid("strict_subset_fraction must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigInvalid("noise_sigma must be >= 0")
        if self.min_attrs < 2:
            # strict-subset captions need at least 2 image attributes
            raise ConfigInvalid("min_attrs must be >= 2")


@dataclass(frozen=True)
class VehicleDataConfig:
    n_train: int = 512
    n_test: int = 128
    noise_radius: int = 12
    confusable_fraction: float = 0.4
    brightness_jitter: float = 0.07
    speckle_fraction_max: float = 0.35
    speckle_gain: float = 1.25

    def validate(self) -> None:
        if self.n_train < 8 or self.n_test < 8:
            raise ConfigInvalid("dataset sizes must be >= 8")
        if self.noise_radius < 0 or self.noise_radius > 64:
            raise ConfigInvalid("noise_radius out of range")
        if not 0.0 <= self.confusable_fraction <= 1.0:
            raise ConfigInvalid("confusable_fraction must be in [0, 1]")
        if not 0.0 <= self.brightness_jitter < 0.08:
            # above ~0.08 the nearest-palette detector margin collapses
            raise ConfigInvalid("brightness_jitter must be in [0, 0.08)")
        if not 0.0 <= self.speckle_fraction_max <= 0.4:
            raise ConfigInvalid("speckle_fraction_max must be in [0, 0.4]")
        if not 1.0 <= self.speckle_gain <= 1.4:
            raise ConfigInvalid("speckle_gain must be in [1.0, 1.4]")


CONFUSABLE_COLORS = ("white", "silver", "gray")

# fixed background stripes, chosen off-palette so body pixels decide the vote
_BG_DARK = (60, 64, 72)
_BG_LIGHT = (84, 88, 96)
_BODY_ROWS = (6, 30)
_BODY_COLS = (2, 30)


def _strict_config_dict(data: dict, cls):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigInvalid(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**data)


def pedestrian_config_from_dict(data: dict) -> PedestrianDataConfig:
    cfg = _strict_config_dict(data, PedestrianDataConfig)
    cfg.validate()
    return cfg


def vehicle_config_from_dict(data: dict) -> VehicleDataConfig:
    cfg = _strict_config_dict(data, VehicleDataConfig)
    cfg.validate()
    return cfg


def _draw_attribute_sets(rng: np.random.Generator, cfg: PedestrianDataConfig,
                         q: int, strict_subset: bool | None) -> tuple[AttributeSet, AttributeSet]:
    """Image attributes (2-5 bits) and a nonempty caption subset thereof.

    strict_subset=None draws any nonempty subset (training); True forces a
    proper subset, False forces the full set (test queries).
    """
    k = int(rng.integers(cfg.min_attrs, cfg.max_attrs + 1))
    image_idx = rng.choice(q, size=k, replace=False)
    image_attrs = AttributeSet.from_indices(image_idx, q)
    if strict_subset is False:
        return image_attrs, image_attrs
    if strict_subset is True:
        m = int(rng.integers(1, k))  # proper subset: 1 .. k-1 attributes
        cap_idx = rng.choice(np.sort(image_idx), size=m, replace=False)
        return image_attrs, AttributeSet.from_indices(cap_idx, q)
    while True:  # training: any nonempty subset; empty draws are regenerated
        keep = rng.random(k) < 0.5
        if keep.any():
            cap_idx = np.sort(image_idx)[keep]
            return image_attrs, AttributeSet.from_indices(cap_idx, q)


def _pedestrian_features(attrs: AttributeSet, mixing: np.ndarray, sigma: float,
                         rng: np.random.Generator) -> np.ndarray:
    return mixing @ attrs.to_float_bits() + sigma * rng.standard_normal(PED_FEATURE_DIM)


def generate_pedestrian_dataset(config: PedestrianDataConfig, seed: int) -> DatasetSplit:
    config.validate()
    attr_vocab = AttributeVocabulary()
    vocab = build_shared_vocab(attr_vocab)
    q = attr_vocab.q
    mixing = child_rng(seed, "ped/mixing").standard_normal((PED_FEATURE_DIM, q))

    def make_sample(sid: int, label: str, strict: bool | None):
        rng = child_rng(seed, label)
        image_attrs, cap_attrs = _draw_attribute_sets(rng, config, q, strict)
        words = caption_from_attributes(cap_attrs, attr_vocab)
        return PedestrianSample(
            id=sid,
            image_features=_pedestrian_features(image_attrs, mixing, config.noise_sigma, rng),
            caption=" ".join(words),
            caption_tokens=vocab.encode(words),
            image_attributes=image_attrs,
            caption_attributes=cap_attrs,
        )

    train = [make_sample(i, f"ped/train/{i}", None) for i in range(config.n_train)]

    n_strict = round(config.strict_subset_fraction * config.n_test)
    strict_flags = [i < n_strict for i in range(config.n_test)]
    order = child_rng(seed, "ped/test/strict-order").permutation(config.n_test)
    strict_flags = [strict_flags[j] for j in order]

    gallery = []
    queries = []
    for j in range(config.n_test):
        sid = config.n_train + j
        sample = make_sample(sid, f"ped/test/{j}", strict_flags[j])
        gallery.append(sample)
        queries.append((sample, strict_flags[j]))

    test_queries = []
    for sample, strict in queries:
        gt = [g.id for g in gallery if sample.caption_attributes.is_subset(g.image_attributes)]
        test_queries.append(Query(
            id=sample.id, caption=sample.caption, tokens=list(sample.caption_tokens),
            gt_ids=gt, domain="pedestrian", strict_subset=strict,
        ))

    meta = {
        "task": "pedestrian",
        "seed": seed,
        "config": dataclasses.asdict(config),
        "attribute_names": list(attr_vocab.names),
        "vocab": list(vocab.tokens),
        "feature_dim": PED_FEATURE_DIM,
    }
    return DatasetSplit(task="pedestrian", train=train, test_queries=test_queries,
                        test_gallery=gallery, meta=meta)


def body_region_mask(side: int = augment.IMAGE_SIDE) -> np.ndarray:
    mask = np.zeros((side, side), dtype=bool)
    mask[_BODY_ROWS[0]:_BODY_ROWS[1], _BODY_COLS[0]:_BODY_COLS[1]] = True
    return mask


def _render_vehicle(rng: np.random.Generator, cfg: VehicleDataConfig,
                    base_rgb: tuple[int, int, int]) -> tuple[np.ndarray, tuple[int, int, int]]:
    side = augment.IMAGE_SIDE
    img = np.empty((side, side, 3), dtype=np.float64)
    rows = np.arange(side)
    stripe = (rows // 4) % 2  # fixed horizontal stripes
    img[stripe == 0] = _BG_DARK
    img[stripe == 1] = _BG_LIGHT

    jitter = 1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
    body_color = np.clip(np.round(np.array(base_rgb, dtype=np.float64) * jitter), 0, 255)

    mask = body_region_mask(side)
    n_body = int(mask.sum())
    body = np.tile(body_color, (n_body, 1))
    if cfg.speckle_fraction_max > 0:
        frac = rng.uniform(0.0, cfg.speckle_fraction_max)
        speckled = rng.random(n_body) < frac
        body[speckled] = np.clip(np.round(body[speckled] * cfg.speckle_gain), 0, 255)
    if cfg.noise_radius > 0:
        body += rng.integers(-cfg.noise_radius, cfg.noise_radius + 1, size=(n_body, 3))
    img[mask] = np.clip(body, 0, 255)
    true_color = tuple(int(c) for c in body_color)
    return img.astype(np.uint8), true_color


def generate_vehicle_dataset(config: VehicleDataConfig, seed: int,
                             palette: Palette = DEFAULT_PALETTE,
                             vehicle_types: tuple[str, ...] = DEFAULT_VEHICLE_TYPES) -> DatasetSplit:
    config.validate()
    if len(palette.entries) < 2:
        raise ConfigInvalid("palette needs at least 2 entries")
    if len(vehicle_types) < 2:
        raise ConfigInvalid("need at least 2 vehicle types")
    vocab = build_shared_vocab(palette=palette, vehicle_types=vehicle_types)
    confusable_ids = [palette.id_of(n) for n in CONFUSABLE_COLORS if n in palette.names]
    plain_ids = [e[0] for e in palette.entries if e[0] not in confusable_ids]

    def make_sample(sid: int, label: str) -> VehicleSample:
        rng = child_rng(seed, label)
        if confusable_ids and rng.random() < config.confusable_fraction:
            color_id = int(rng.choice(confusable_ids))
        else:
            color_id = int(rng.choice(plain_ids if plain_ids else confusable_ids))
        type_id = int(rng.integers(len(vehicle_types)))
        image, true_color = _render_vehicle(rng, config, palette.rgb_of(color_id))
        words = vehicle_caption((color_id, type_id), palette, vehicle_types)
        return VehicleSample(
            id=sid, image=image, caption=" ".join(words),
            caption_tokens=vocab.encode(words), tag=(color_id, type_id),
            true_body_color=true_color,
        )

    train = [make_sample(i, f"veh/train/{i}") for i in range(config.n_train)]
    gallery = [make_sample(config.n_train + j, f"veh/test/{j}") for j in range(config.n_test)]

    test_queries = []
    for sample in gallery:
        gt = [g.id for g in gallery if g.tag == sample.tag]
        test_queries.append(Query(
            id=sample.id, caption=sample.caption, tokens=list(sample.caption_tokens),
            gt_ids=gt, domain="vehicle",
            confusable=palette.name_of(sample.tag[0]) in CONFUSABLE_COLORS,
        ))

    meta = {
        "task": "vehicle",
        "seed": seed,
        "config": dataclasses.asdict(config),
        "palette": [[e[0], e[1], list(e[2])] for e in palette.entries],
        "vehicle_types": list(vehicle_types),
        "vocab": list(vocab.tokens),
    }
    return DatasetSplit(task="vehicle", train=train, test_queries=test_queries,
                        test_gallery=gallery, meta=meta)


# ---------------------------------------------------------------------------
# on-disk format


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def _sample_record(sample, task: str) -> dict:
    if task == "pedestrian":
        return {
            "id": sample.id,
            "caption": sample.caption,
            "tokens": sample.caption_tokens,
            "image_attr_bits": sample.image_attributes.to_hex(),
            "caption_attr_bits": sample.caption_attributes.to_hex(),
            "tag": None,
            "image_ref": None,
        }
    return {
        "id": sample.id,
        "caption": sample.caption,
        "tokens": sample.caption_tokens,
        "image_attr_bits": None,
        "caption_attr_bits": None,
        "tag": list(sample.tag),
        "image_ref": f"images/{sample.id}.ppm",
        "true_body_color": list(sample.true_body_color),
    }


def _write_split(root: Path, name: str, samples, task: str, files: dict) -> None:
    split_dir = root / name
    split_dir.mkdir(parents=True, exist_ok=True)
    lines = b"".join(_json_bytes(_sample_record(s, task)) for s in samples)
    rel = f"{name}/samples.jsonl"
    (root / rel).write_bytes(lines)
    files[rel] = {"sha256": hashlib.sha256(lines).hexdigest()}

    if task == "pedestrian":
        feats = np.stack([s.image_features for s in samples]).astype("<f8")
        raw = feats.tobytes()
        rel = f"{name}/features.f64"
        (root / rel).write_bytes(raw)
        files[rel] = {
            "sha256": hashlib.sha256(raw).hexdigest(),
            "dims": [len(samples), PED_FEATURE_DIM],
            "count": len(samples),
        }
    else:
        img_dir = split_dir / "images"
        img_dir.mkdir(exist_ok=True)
        for s in samples:
            rel = f"{name}/images/{s.id}.ppm"
            augment.write_ppm(root / rel, s.image)
            files[rel] = {"sha256": hashlib.sha256((root / rel).read_bytes()).hexdigest()}


def save_dataset(split: DatasetSplit, outdir: str | Path) -> str:
    """Write the dataset directory; returns the dataset content hash."""
    root = Path(outdir)
    root.mkdir(parents=True, exist_ok=True)
    files: dict[str, dict] = {}
    _write_split(root, "train", split.train, split.task, files)
    _write_split(root, "gallery", split.test_gallery, split.task, files)

    qlines = b"".join(_json_bytes({
        "id": q.id, "caption": q.caption, "tokens": q.tokens, "gt_ids": q.gt_ids,
        "domain": q.domain, "strict_subset": q.strict_subset, "confusable": q.confusable,
    }) for q in split.test_queries)
    (root / "queries.jsonl").write_bytes(qlines)
    files["queries.jsonl"] = {"sha256": hashlib.sha256(qlines).hexdigest()}

    hasher = hashlib.sha256()
    for rel in sorted(files):
        hasher.update(rel.encode("utf-8"))
        hasher.update(files[rel]["sha256"].encode("ascii"))
    dataset_hash = hasher.hexdigest()

    manifest = {
        "format": DATASET_FORMAT,
        "meta": {k: v for k, v in split.meta.items() if k != "dataset_hash"},
        "files": files,
        "dataset_hash": dataset_hash,
    }
    (root / "manifest.json").write_bytes(_json_bytes(manifest))
    split.meta["dataset_hash"] = dataset_hash
    return dataset_hash


def _load_samples(root: Path, name: str, task: str, meta: dict) -> list:
    lines = (root / name / "samples.jsonl").read_bytes().splitlines()
    records = [json.loads(l) for l in lines]
    if task == "pedestrian":
        q = len(meta["attribute_names"])
        raw = (root / name / "features.f64").read_bytes()
        feats = np.frombuffer(raw, dtype="<f8").reshape(len(records), PED_FEATURE_DIM)
        return [PedestrianSample(
            id=r["id"], image_features=feats[k].copy(), caption=r["caption"],
            caption_tokens=list(r["tokens"]),
            image_attributes=AttributeSet.from_hex(r["image_attr_bits"], q),
            caption_attributes=AttributeSet.from_hex(r["caption_attr_bits"], q),
        ) for k, r in enumerate(records)]
    return [VehicleSample(
        id=r["id"], image=augment.read_ppm(root / name / "images" / f"{r['id']}.ppm"),
        caption=r["caption"], caption_tokens=list(r["tokens"]),
        tag=tuple(r["tag"]), true_body_color=tuple(r["true_body_color"]),
    ) for r in records]


def load_dataset(root: str | Path, verify: bool = True) -> DatasetSplit:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetIntegrityError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetIntegrityError(f"unexpected dataset format {manifest.get('format')!r}")
    if verify:
        for rel, info in manifest["files"].items():
            digest = hashlib.sha256((root / rel).read_bytes()).hexdigest()
            if digest != info["sha256"]:
                raise DatasetIntegrityError(f"hash mismatch for {rel}")
    meta = dict(manifest["meta"])
    meta["dataset_hash"] = manifest["dataset_hash"]
    task = meta["task"]
    train = _load_samples(root, "train", task, meta)
    gallery = _load_samples(root, "gallery", task, meta)
    queries = [Query(
        id=r["id"], caption=r["caption"], tokens=list(r["tokens"]),
        gt_ids=list(r["gt_ids"]), domain=r["domain"],
        strict_subset=r["strict_subset"], confusable=r["confusable"],
    ) for r in map(json.loads, (root / "queries.jsonl").read_bytes().splitlines())]
    return DatasetSplit(task=task, train=train, test_queries=queries,
                        test_gallery=gallery, meta=meta)


def dataset_hash_of(root: str | Path) -> str:
    manifest = json.loads((Path(root) / "manifest.json").read_text())
    return manifest["dataset_hash"]
