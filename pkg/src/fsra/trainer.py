"""SGD training loop: grouped learning rates, step decay, checkpoints.

Backbone parameters train at one learning rate, head parameters at
another; both decay by the same factor at the milestone epochs. Weight
decay skips normalization gains/biases and the token/position tables.
Runs are reproducible from (config, seed): the data schedule is derived
per epoch and the dropout stream rides in the checkpoint.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fsra import autodiff as ad
from fsra import checkpoint as ckpt
from fsra.autodiff import Tensor
from fsra.config import RunConfig, TrainConfig
from fsra.data import AugmentConfig, Batch, DatasetIndex, augment, load_image, multiple_sample
from fsra.head import FsraModel
from fsra.losses import total_loss


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# initialization policies


def trunc_normal_(rng: np.random.Generator, shape, std: float = 0.02,
                  bound: float = 2.0) -> np.ndarray:
    """Normal(0, std^2) with resampling outside +-bound*std."""
    out = rng.standard_normal(shape) * std
    limit = bound * std
    bad = np.abs(out) > limit
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > limit
    return out


def kaiming_normal_(rng: np.random.Generator, shape) -> np.ndarray:
    """Fan-in Kaiming normal with rectifier gain: std = sqrt(2 / fan_in)."""
    fan_in = shape[0]
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def init_params(model: FsraModel, seed: int) -> FsraModel:
    """Initialize every parameter and reseed the model's dropout stream."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11]))
    model.init(rng)
    model.seed_dropout(seed)
    return model


# ---------------------------------------------------------------------------
# optimizer


NO_DECAY_MARKERS = (".norm", ".bn.", "cls_token", "pos_embed")


@dataclass
class ParamGroup:
    name: str
    tensor: Tensor
    lr_key: str        # "backbone" or "heads"
    decay: bool


def parameter_groups(model: FsraModel) -> list[ParamGroup]:
    groups = []
    for name, tensor in model.params.items():
        lr_key = "backbone" if name.startswith("backbone.") else "heads"
        decay = not any(marker in name for marker in NO_DECAY_MARKERS)
        groups.append(ParamGroup(name=name, tensor=tensor, lr_key=lr_key, decay=decay))
    return groups


class SgdState:
    def __init__(self, groups: list[ParamGroup]):
        self.velocity = {g.name: np.zeros_like(g.tensor.data) for g in groups}


def sgd_step(groups: list[ParamGroup], state: SgdState, lr_map: dict[str, float],
             momentum: float, weight_decay: float) -> None:
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v."""
    for g in groups:
        grad = g.tensor.grad
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"non-finite gradient in parameter {g.name!r}")
        update = grad
        if weight_decay and g.decay:
            update = update + weight_decay * g.tensor.data
        v = state.velocity[g.name]
        v *= momentum
        v += update
        g.tensor.data = g.tensor.data - lr_map[g.lr_key] * v


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> dict[str, float]:
    passed = sum(1 for m in cfg.milestones() if epoch >= m)
    factor = cfg.decay_factor ** passed
    return {"backbone": cfg.lr_backbone * factor, "heads": cfg.lr_heads * factor}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: FsraModel, state: SgdState, epoch: int,
                    config_hash: str) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        arrays[name] = p.data
    for name, buf in model.buffers().items():
        arrays[f"buffer.{name}"] = buf
    for name, v in state.velocity.items():
        arrays[f"optim.v.{name}"] = v
    arrays["meta.epoch"] = np.array([epoch], dtype=np.float32)
    arrays["meta.config_hash"] = ckpt.bytes_to_f32(config_hash.encode())
    rng_state = json.dumps(model.rng.bit_generator.state, sort_keys=True)
    arrays["meta.rng_state"] = ckpt.bytes_to_f32(rng_state.encode())
    ckpt.save_arrays(path, arrays)


def load_checkpoint(path, model: FsraModel, state: SgdState | None = None) -> dict:
    """Restore parameters (and optimizer/rng state when given) from a container."""
    arrays = ckpt.load_arrays(path)
    buffers = {}
    for name, p in model.params.items():
        if name not in arrays:
            raise ValueError(f"checkpoint {path} is missing parameter {name!r}")
        if tuple(arrays[name].shape) != tuple(p.shape):
            raise ValueError(
                f"checkpoint {path}: parameter {name!r} has shape "
                f"{arrays[name].shape}, model expects {p.shape}")
        p.data = arrays[name].astype(p.dtype)
    for name in model.buffers():
        buffers[name] = arrays[f"buffer.{name}"]
    model.load_buffers(buffers)
    if state is not None:
        for name in state.velocity:
            state.velocity[name] = arrays[f"optim.v.{name}"].astype(np.float32)
    if "meta.rng_state" in arrays:
        rng_state = json.loads(ckpt.f32_to_bytes(arrays["meta.rng_state"]).decode())
        model.rng.bit_generator.state = rng_state
    meta = {
        "epoch": int(arrays["meta.epoch"][0]),
        "config_hash": ckpt.f32_to_bytes(arrays["meta.config_hash"]).decode(),
    }
    return meta


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    epoch_losses: list[float]


class _ImageCache:
    """Decoded base images; augmentation happens per sample on top."""

    def __init__(self, size: int):
        self.size = size
        self._store: dict[Path, np.ndarray] = {}

    def get(self, path: Path) -> np.ndarray:
        if path not in self._store:
            self._store[path] = load_image(path, self.size)
        return self._store[path]


def _load_batch(batch: Batch, cache: _ImageCache, aug_cfg: AugmentConfig,
                dtype=np.float32) -> tuple[Tensor, Tensor, np.ndarray]:
    def stack(refs):
        imgs = []
        for ref in refs:
            base = cache.get(ref.path)
            rng = np.random.default_rng(ref.aug_seed)
            imgs.append(augment(base, aug_cfg, rng))
        return Tensor(np.stack(imgs).astype(dtype))

    return stack(batch.drone), stack(batch.satellite), batch.labels


def train(cfg: RunConfig, index: DatasetIndex, resume: Path | str | None = None,
          model: FsraModel | None = None) -> TrainResult:
    """Run the full schedule; writes train_log.csv, checkpoints, run_config.json."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(cfg.to_json())

    if model is None:
        model = FsraModel(cfg.backbone, cfg.regions, num_classes=len(index.classes),
                          head_hidden=cfg.head_hidden, head_dropout=cfg.head_dropout)
        init_params(model, cfg.train.seed)
    groups = parameter_groups(model)
    state = SgdState(groups)
    start_epoch = 0
    log_rows: list[str] = []
    if resume is not None:
        meta = load_checkpoint(resume, model, state)
        start_epoch = meta["epoch"] + 1
        prior_log = out_dir / "train_log.csv"
        if prior_log.exists():
            kept = [line for line in prior_log.read_text().splitlines()[1:]
                    if line and int(line.split(",")[0]) <= meta["epoch"]]
            log_rows.extend(kept)

    cache = _ImageCache(cfg.backbone.image_size)
    sampler_cfg = cfg.sampler_config()
    epoch_losses: list[float] = []
    last_ckpt = out_dir / f"ckpt_epoch_{start_epoch - 1}.bin"
    log_path = out_dir / "train_log.csv"

    for epoch in range(start_epoch, cfg.train.epochs):
        lr_map = lr_at_epoch(cfg.train, epoch)
        schedule = multiple_sample(index, sampler_cfg, epoch=epoch)
        step_losses = []
        for step, batch in enumerate(schedule):
            drone_x, sat_x, labels = _load_batch(batch, cache, cfg.augment)
            ad.reset_tape()
            bundle_d = model.forward(drone_x, training=True)
            bundle_s = model.forward(sat_x, training=True)
            loss, parts = total_loss(bundle_d, bundle_s, labels, labels, cfg.loss)
            if not np.isfinite(parts.total):
                _write_log(log_path, log_rows)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"last checkpoint: {last_ckpt if last_ckpt.exists() else 'none'}")
            ad.backward(loss)
            try:
                sgd_step(groups, state, lr_map, cfg.train.momentum, cfg.train.weight_decay)
            except TrainingDiverged:
                _write_log(log_path, log_rows)
                raise
            ad.zero_grads(g.tensor for g in groups)
            step_losses.append(parts.total)
            log_rows.append(",".join([
                str(epoch), str(step), _fmt(parts.id), _fmt(parts.triplet),
                _fmt(parts.kl), _fmt(parts.total)]))
        epoch_losses.append(float(np.mean(step_losses)))
        last_ckpt = out_dir / f"ckpt_epoch_{epoch}.bin"
        save_checkpoint(last_ckpt, model, state, epoch, cfg.hash())
        _write_log(log_path, log_rows)

    return TrainResult(checkpoint_path=last_ckpt, log_path=log_path,
                       epoch_losses=epoch_losses)


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_log(path: Path, rows: list[str]) -> None:
    path.write_text("epoch,step,id_loss,triplet,kl,total\n" + "\n".join(rows)
                    + ("\n" if rows else ""))
