"""Optimization recipes: masked pretraining, supervised training from
scratch and fine-tuning with layer-wise learning-rate decay."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from miae.errors import ConfigError, DomainError, LabelError, StepError
from miae.losses import LossReport, composite_loss
from miae.masking import STRATEGIES, full_plan, sample_mask
from miae.model import FoldClassifier, MiAE, collate, save_checkpoint, unpad_outputs
from miae.structure_io import ProteinBackbone

log = logging.getLogger(__name__)

MODES = ("pretrain", "scratch", "finetune")

MODE_DEFAULTS = {
    "pretrain": dict(base_lr=0.0024, weight_decay=0.05, batch_size=4096,
                     warmup_steps=5000, total_steps=100000, mask_ratio=0.9),
    "scratch": dict(base_lr=0.0016, weight_decay=0.1, batch_size=4096,
                    warmup_steps=1830, total_steps=18300, mask_ratio=0.0),
    "finetune": dict(base_lr=0.0016, weight_decay=0.1, batch_size=1024,
                     warmup_steps=1830, total_steps=18300, mask_ratio=0.0, layer_decay=0.8),
}


@dataclass
class TrainConfig:
    mode: str = "pretrain"
    base_lr: float = 0.0024
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    batch_size: int = 4096
    micro_batch_size: int = 32
    warmup_steps: int = 5000
    total_steps: int = 100000
    layer_decay: float = 0.8
    noise_std: float = 0.2
    mask_ratio: float = 0.9
    mask_strategy: str = "random"
    pooling: str = "cls"
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")
        if self.batch_size < 1 or self.micro_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.mask_strategy not in STRATEGIES:
            raise ConfigError(f"unknown masking strategy {self.mask_strategy!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("base_lr and weight_decay must be non-negative")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in [0, 1)")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown training option(s): {sorted(unknown)}")
        return cls(mode=mode, **{**MODE_DEFAULTS[mode], **overrides})

    @property
    def dtype(self):
        return torch.float64 if self.precision == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise DomainError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.base_lr
    p = (step - cfg.warmup_steps) / span
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * p))


def layerwise_scale(layer_index: int, n_layers: int, decay: float) -> float:
    return decay ** (n_layers - layer_index)


def augment_noise(b: ProteinBackbone, std: float, seed) -> ProteinBackbone:
    """Add i.i.d. Gaussian offsets of scale ``std`` (Å) to every backbone atom."""
    if std < 0:
        raise DomainError("noise std must be non-negative")
    if std == 0:
        return b.replace()
    rng = np.random.default_rng(seed)
    return b.replace(coords=b.coords + rng.normal(scale=std, size=b.coords.shape))


@dataclass
class TrainState:
    model: nn.Module
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    step: int = 0


def param_groups(model: nn.Module, cfg: TrainConfig) -> list[dict]:
    """AdamW groups; matrices are decayed, vectors (biases, norms, tokens) are not.

    In fine-tuning mode each group also carries its layer-wise lr scale.
    """
    groups: dict[tuple, dict] = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        wd = cfg.weight_decay if p.ndim >= 2 else 0.0
        scale = 1.0
        if cfg.mode == "finetune" and hasattr(model, "layer_id"):
            scale = layerwise_scale(model.layer_id(name), model.encoder.num_layers, cfg.layer_decay)
        g = groups.setdefault((wd, scale), {"params": [], "names": [], "weight_decay": wd,
                                            "lr_scale": scale})
        g["params"].append(p)
        g["names"].append(name)
    return list(groups.values())


def make_train_state(model: nn.Module, cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = model.to(cfg.dtype)
    opt = torch.optim.AdamW(param_groups(model, cfg), lr=cfg.base_lr, betas=cfg.betas,
                            weight_decay=cfg.weight_decay)
    return TrainState(model=model, optimizer=opt, cfg=cfg)


def _set_lr(state: TrainState) -> float:
    lr = cosine_lr(min(state.step, state.cfg.total_steps), state.cfg)
    for g in state.optimizer.param_groups:
        g["lr"] = lr * g["lr_scale"]
    return lr


def _sample_seed(cfg, step, i, stream):
    return np.random.SeedSequence([cfg.seed, step, i, stream])


def _finish_step(state: TrainState) -> None:
    for p in state.model.parameters():
        if p.grad is None:
            # materialize so decoupled weight decay still applies
            p.grad = torch.zeros_like(p)
        elif not torch.isfinite(p.grad).all():
            raise StepError(f"non-finite gradient at step {state.step}")
    state.optimizer.step()
    state.step += 1


def _micro_batches(n, size):
    return [range(i, min(i + size, n)) for i in range(0, n, size)]


def pretrain_step(samples: list[ProteinBackbone], state: TrainState,
                  cfg: TrainConfig | None = None) -> tuple[TrainState, LossReport]:
    """One masked-reconstruction update averaged over ``samples``.

    Inputs are noise-augmented; the reconstruction target is the clean
    structure. Raises StepError naming the sample if its loss is non-finite.
    """
    cfg = cfg or state.cfg
    model = state.model
    model.train()
    _set_lr(state)
    state.optimizer.zero_grad(set_to_none=False)
    reports = []
    for chunk in _micro_batches(len(samples), cfg.micro_batch_size):
        clean = [samples[i] for i in chunk]
        noisy = [augment_noise(b, cfg.noise_std, _sample_seed(cfg, state.step, i, 0))
                 for i, b in zip(chunk, clean)]
        plans = [sample_mask(len(b), cfg.mask_ratio, cfg.mask_strategy,
                             _sample_seed(cfg, state.step, i, 1).generate_state(1)[0])
                 for i, b in zip(chunk, clean)]
        batch = collate(noisy, plans, dtype=cfg.dtype, max_length=model.cfg.max_length)
        out = model(batch)
        per = []
        for k, b in enumerate(clean):
            r = composite_loss(unpad_outputs(out, k, len(b)), b.coords, b.aatype,
                               model.cfg.use_inverse_folding_loss)
            if not torch.isfinite(r.total):
                raise StepError(f"non-finite loss for sample {b.id}", sample_id=b.id)
            per.append(r)
        loss = torch.stack([r.total for r in per]).sum() / len(samples)
        loss.backward()
        reports.extend(per)
    _finish_step(state)
    mean = LossReport.mean(reports)
    return state, LossReport(**{k: v.detach() for k, v in vars(mean).items()})


def classification_step(samples: list[ProteinBackbone], labels, state: TrainState,
                        cfg: TrainConfig | None = None) -> tuple[TrainState, dict]:
    """Cross-entropy update of a FoldClassifier on unmasked inputs."""
    cfg = cfg or state.cfg
    model = state.model
    num_classes = model.head.out_features
    labels = np.asarray(labels, dtype=np.int64)
    bad = np.nonzero((labels < 0) | (labels >= num_classes))[0]
    if bad.size:
        raise LabelError(f"label {labels[bad[0]]} outside [0, {num_classes})", index=int(bad[0]))
    model.train()
    lr = _set_lr(state)
    state.optimizer.zero_grad(set_to_none=False)
    total, correct = 0.0, 0
    for chunk in _micro_batches(len(samples), cfg.micro_batch_size):
        noisy = [augment_noise(samples[i], cfg.noise_std, _sample_seed(cfg, state.step, i, 0))
                 for i in chunk]
        batch = collate(noisy, dtype=cfg.dtype, max_length=model.cfg.max_length)
        target = torch.as_tensor(labels[list(chunk)])
        logits = model(batch)
        loss = F.cross_entropy(logits, target, reduction="sum") / len(samples)
        if not torch.isfinite(loss):
            raise StepError(f"non-finite loss at step {state.step}")
        loss.backward()
        total += float(loss.detach())
        correct += int((logits.argmax(-1) == target).sum())
    _finish_step(state)
    return state, {"step": state.step, "lr": lr, "loss": total, "accuracy": correct / len(samples)}


finetune_step = classification_step
scratch_step = classification_step


# ----------------------------------------------------------------- run loops


def batch_indices(lengths, batch_size: int, seed: int) -> Iterator[list[int]]:
    """Endless stream of length-bucketed batches: shuffle, sort within
    windows of eight batches, then shuffle the batch order."""
    lengths = np.asarray(lengths)
    rng = np.random.default_rng(seed)
    n = len(lengths)
    batch_size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        batches = []
        window = 8 * batch_size
        for w in range(0, n, window):
            chunk = perm[w:w + window]
            chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
            batches += [chunk[i:i + batch_size].tolist() for i in range(0, len(chunk), batch_size)]
        for k in rng.permutation(len(batches)):
            if len(batches[k]) == batch_size:
                yield batches[k]


def _emit(metrics_fh, record):
    if metrics_fh is not None:
        metrics_fh.write(json.dumps(record) + "\n")
        metrics_fh.flush()


def run_pretraining(backbones: list[ProteinBackbone], model: MiAE, cfg: TrainConfig,
                    out_dir=None, progress=None) -> TrainState:
    """Pretrain for ``cfg.total_steps`` updates; writes metrics.jsonl and
    checkpoints under ``out_dir`` when given."""
    state = make_train_state(model, cfg)
    batches = batch_indices([len(b) for b in backbones], cfg.batch_size, cfg.seed)
    fh = _open_metrics(out_dir)
    try:
        while state.step < cfg.total_steps:
            idx = next(batches)
            lr = cosine_lr(state.step, cfg)
            _, report = pretrain_step([backbones[i] for i in idx], state, cfg)
            if state.step % cfg.log_every == 0 or state.step == cfg.total_steps:
                _emit(fh, {"step": state.step, "lr": lr, **report.as_dict()})
            if progress:
                progress(state.step, report)
            _maybe_checkpoint(state, out_dir, "autoencoder")
    finally:
        if fh:
            fh.close()
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "final.pt", state.model, "autoencoder", state.step)
    return state


def run_classification(backbones, labels, model: FoldClassifier, cfg: TrainConfig,
                       out_dir=None, progress=None) -> TrainState:
    state = make_train_state(model, cfg)
    labels = np.asarray(labels)
    batches = batch_indices([len(b) for b in backbones], cfg.batch_size, cfg.seed)
    fh = _open_metrics(out_dir)
    extra = {"num_classes": model.head.out_features, "pooling": model.pooling}
    try:
        while state.step < cfg.total_steps:
            idx = next(batches)
            _, rec = classification_step([backbones[i] for i in idx], labels[idx], state, cfg)
            if state.step % cfg.log_every == 0 or state.step == cfg.total_steps:
                _emit(fh, rec)
            if progress:
                progress(state.step, rec)
            _maybe_checkpoint(state, out_dir, "classifier", extra)
    finally:
        if fh:
            fh.close()
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "final.pt", state.model, "classifier", state.step,
                        extra=extra)
    return state


def _open_metrics(out_dir):
    if out_dir is None:
        return None
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    return open(Path(out_dir) / "metrics.jsonl", "w")


def _maybe_checkpoint(state, out_dir, kind, extra=None):
    k = state.cfg.checkpoint_every
    if out_dir is not None and k and state.step % k == 0:
        save_checkpoint(Path(out_dir) / f"step_{state.step:07d}.pt", state.model, kind,
                        state.step, optimizer=state.optimizer, extra=extra)


@torch.no_grad()
def reconstruct(model: MiAE, b: ProteinBackbone, ratio: float, strategy: str = "random",
                seed: int = 0):
    """Predicted (n, 3, 3) coordinates and the mask plan used."""
    model.eval()
    dtype = next(model.parameters()).dtype
    plan = sample_mask(len(b), ratio, strategy, seed) if ratio > 0 else full_plan(len(b))
    out = model(collate([b], [plan], dtype=dtype, max_length=model.cfg.max_length))
    return out["coords"][0].double().numpy(), plan


def classifier_from_pretrained(mae: MiAE, num_classes: int, pooling: str = "cls") -> FoldClassifier:
    clf = FoldClassifier(mae.cfg, num_classes, pooling)
    clf.encoder.load_state_dict(mae.encoder.state_dict())
    return clf.to(next(mae.parameters()).dtype)

