"""Seeded training loops, the Adam optimizer, and checkpoint IO.

A run is a pure function of (config, dataset bytes): shuffling, masking
and negative mining all draw from (seed, label) child streams, so two
runs with the same inputs produce bit-identical checkpoints.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment, losses, model
from .datagen import DatasetSplit, Vocabulary, body_region_mask
from .errors import (ConfigInvalid, CorruptCheckpoint, DivergedLoss,
                     ShapeMismatch, TaskDatasetMismatch)
from .numerics import child_rng

CHECKPOINT_FORMAT = "tirlab-checkpoint-v1"


@dataclass(frozen=True)
class TrainConfig:
    task: str = "pedestrian"
    batch_size: int = 32
    epochs: int = 30          # vehicle default is 20, see default_train_config
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    tau_irm: float = 0.07
    tau_fitc_init: float = 0.07
    tau_fitc_floor: float = 1e-3
    loss_eps: float = 1e-8
    w_irr: float = 1.0
    w_ac: float = 1.0
    w_irm: float = 1.0
    w_fitc: float = 1.0
    w_fitm: float = 1.0
    use_inclusion_targets: bool = True
    augment_colors: bool = True

    def validate(self) -> None:
        if self.task not in ("pedestrian", "vehicle"):
            raise ConfigInvalid(f"unknown task {self.task!r}")
        if self.batch_size < 2:
            raise ConfigInvalid("batch_size must be >= 2")
        if self.lr <= 0:
            raise ConfigInvalid("lr must be > 0")
        if self.epochs < 0:
            raise ConfigInvalid("epochs must be >= 0")
        self.loss_config().validate()

    def loss_config(self) -> losses.LossConfig:
        return losses.LossConfig(
            tau_irm=self.tau_irm, tau_fitc_init=self.tau_fitc_init,
            tau_fitc_floor=self.tau_fitc_floor, eps=self.loss_eps,
            w_irr=self.w_irr, w_ac=self.w_ac, w_irm=self.w_irm,
            w_fitc=self.w_fitc, w_fitm=self.w_fitm,
            use_inclusion_targets=self.use_inclusion_targets,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def default_train_config(task: str, **overrides) -> TrainConfig:
    base = {"task": task}
    if task == "vehicle":
        base["epochs"] = 20
    base.update(overrides)
    return train_config_from_dict(base)


def train_config_from_dict(data: dict) -> TrainConfig:
    allowed = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
    cfg = TrainConfig(**data)
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(params: model.Params) -> AdamState:
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: model.Params, grads: dict, state: AdamState,
              hyper: AdamHyper) -> model.Params:
    """Bias-corrected Adam update; returns new parameter arrays."""
    state.t += 1
    t = state.t
    out: model.Params = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        state.m[name] = hyper.beta1 * state.m[name] + (1 - hyper.beta1) * g
        state.v[name] = hyper.beta2 * state.v[name] + (1 - hyper.beta2) * g * g
        m_hat = state.m[name] / (1 - hyper.beta1 ** t)
        v_hat = state.v[name] / (1 - hyper.beta2 ** t)
        out[name] = p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return out


@dataclass
class RunRecord:
    task: str
    config_hash: str
    dataset_hash: str
    seed: int
    epochs: list = field(default_factory=list)
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    params: model.Params
    record: RunRecord
    meta: dict


def vehicle_features(samples, augment_colors: bool,
                     palette: augment.Palette) -> np.ndarray:
    """Encoder-input features for vehicle rasters, color-patched when enabled."""
    mask = body_region_mask()
    feats = np.zeros((len(samples), model.IMAGE_INPUT))
    for k, s in enumerate(samples):
        img = s.image
        if augment_colors:
            img, _ = augment.augment_image(img, palette, region_mask=mask)
        feats[k] = augment.image_to_features(img)
    return feats


def _dataset_content_hash(dataset: DatasetSplit) -> str:
    if "dataset_hash" in dataset.meta:
        return dataset.meta["dataset_hash"]
    # in-memory dataset: hash the generation coordinates instead
    blob = json.dumps({"seed": dataset.meta.get("seed"),
                       "config": dataset.meta.get("config"),
                       "task": dataset.task}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def train(config: TrainConfig, dataset: DatasetSplit) -> TrainResult:
    config.validate()
    if config.task != dataset.task:
        raise TaskDatasetMismatch(f"config task {config.task!r} vs dataset {dataset.task!r}")
    start = time.monotonic()
    vocab = Vocabulary(tokens=tuple(dataset.meta["vocab"]))
    loss_cfg = config.loss_config()
    seed = config.seed

    if config.task == "pedestrian":
        q = len(dataset.meta["attribute_names"])
        params = model.init_pedestrian_params(len(vocab), q, seed)
    else:
        params = model.init_vehicle_params(len(vocab), seed,
                                           tau_fitc=config.tau_fitc_init)
        palette = augment.Palette(entries=tuple(
            (e[0], e[1], tuple(e[2])) for e in dataset.meta["palette"]))
        feats = vehicle_features(dataset.train, config.augment_colors, palette)

    state = adam_init(params)
    hyper = AdamHyper(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                      eps=config.adam_eps)
    record = RunRecord(task=config.task, config_hash=config.config_hash(),
                       dataset_hash=_dataset_content_hash(dataset), seed=seed)

    n = len(dataset.train)
    steps_per_epoch = n // config.batch_size
    for epoch in range(config.epochs):
        order = child_rng(seed, f"shuffle/{epoch}").permutation(n)
        epoch_values: list[float] = []
        epoch_components: dict = {}
        for step in range(steps_per_epoch):
            idx = order[step * config.batch_size:(step + 1) * config.batch_size]
            samples = [dataset.train[i] for i in idx]
            if config.task == "pedestrian":
                batch = losses.make_pedestrian_batch(
                    samples, vocab, child_rng(seed, f"mask/{epoch}/{step}"))
                result = losses.pedestrian_objective(params, batch, loss_cfg)
            else:
                batch = losses.VehicleBatch(
                    tokens=[s.caption_tokens for s in samples],
                    features=feats[idx], tags=[s.tag for s in samples])
                result = losses.vehicle_objective(
                    params, batch, loss_cfg,
                    rng=child_rng(seed, f"mine/{epoch}/{step}"))
            if not np.isfinite(result.value) or any(
                    not np.all(np.isfinite(g)) for g in result.grads.values()):
                raise DivergedLoss(f"non-finite loss or gradient at epoch {epoch}")
            params = adam_step(params, result.grads, state, hyper)
            if "tau_fitc" in params:
                params["tau_fitc"] = np.maximum(params["tau_fitc"],
                                                config.tau_fitc_floor)
            epoch_values.append(result.value)
            for k, v in result.components.items():
                epoch_components.setdefault(k, []).append(v)
        record.epochs.append({
            "epoch": epoch,
            "loss": float(np.mean(epoch_values)) if epoch_values else None,
            "components": {k: float(np.mean(v)) for k, v in epoch_components.items()},
        })
    record.wall_time_s = time.monotonic() - start

    meta = {
        "task": config.task,
        "vocab": list(vocab.tokens),
        "config": config.to_dict(),
        "augment_colors": config.augment_colors,
    }
    if config.task == "pedestrian":
        meta["attribute_names"] = list(dataset.meta["attribute_names"])
    else:
        meta["palette"] = dataset.meta["palette"]
        meta["vehicle_types"] = dataset.meta["vehicle_types"]
    return TrainResult(params=params, record=record, meta=meta)


# ---------------------------------------------------------------------------
# checkpoint format: manifest + one little-endian float64 flat file per tensor


def save_checkpoint(params: model.Params, meta: dict, path: str | Path) -> None:
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = arr.tobytes()
        fname = f"tensors/{name}.f64"
        (root / fname).write_bytes(raw)
        tensors[name] = {
            "shape": list(arr.shape),
            "sha256": hashlib.sha256(raw).hexdigest(),
            "file": fname,
        }
    manifest = {"format": CHECKPOINT_FORMAT, "meta": meta, "tensors": tensors}
    blob = (json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n").encode()
    (root / "manifest.json").write_bytes(blob)


def load_checkpoint(path: str | Path) -> tuple[model.Params, dict]:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CorruptCheckpoint(f"missing manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"unreadable manifest: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpoint(f"unexpected checkpoint format {manifest.get('format')!r}")
    params: model.Params = {}
    for name, info in manifest["tensors"].items():
        fpath = root / info["file"]
        if not fpath.exists():
            raise CorruptCheckpoint(f"missing tensor file {info['file']}")
        raw = fpath.read_bytes()
        if hashlib.sha256(raw).hexdigest() != info["sha256"]:
            raise CorruptCheckpoint(f"hash mismatch for tensor {name!r}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(info["shape"]).copy()
    return params, manifest["meta"]
