"""Training loop, checkpoints and inference.

Recipe: Adam (coupled L2 weight decay), lr halved every ``lr_halving_period``
epochs, class balancing once up front, random horizontal flips, fixed
epoch budget and no model selection (the last epoch is the model).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig
from .data import Manifest, ManifestDataset, PreprocessConfig, balance
from .errors import ConfigError, DivergenceError, InitializationError
from .evaluation import ScoreSet
from .heads import VARIANTS, PADNet
from .loss import check_lambda, overall_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "irispad-checkpoint"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    variant: str = "apbs"
    initial_lr: float = 1e-4
    weight_decay: float = 1e-6
    max_epochs: int = 20
    lr_halving_period: int = 6
    batch_size: int = 64
    lam: float = 0.2
    seed: int = 0
    checkpoint_dir: str | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    input_resolution: int = 224
    arch: str = "densenet121"
    pretrained_source: str = "random"
    augment: bool = True

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("initial_lr", "max_epochs", "lr_halving_period", "batch_size", "eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        check_lambda(self.lam)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            input_resolution=self.input_resolution, arch=self.arch, pretrained_source=self.pretrained_source
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def lr_at(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch < config.max_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {config.max_epochs})")
    return config.initial_lr * 0.5 ** (epoch // config.lr_halving_period)


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict | None
    epoch: int
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    manifest_fingerprint: str = ""
    format_version: int = FORMAT_VERSION

    def build_model(self) -> PADNet:
        cfg = self.config
        bb = BackboneConfig(input_resolution=cfg.input_resolution, arch=cfg.arch, pretrained_source="random")
        model = PADNet(cfg.variant, bb)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": ckpt.format_version,
        "epoch": ckpt.epoch,
        "config": ckpt.config.to_dict(),
        "history": ckpt.history,
        "manifest_fingerprint": ckpt.manifest_fingerprint,
        "model": ckpt.model_state,
        "optimizer": ckpt.optimizer_state,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise InitializationError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise InitializationError(f"could not read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise InitializationError(f"{path} is not an irispad checkpoint")
    if payload["format_version"] > FORMAT_VERSION:
        raise InitializationError(f"{path} has format_version {payload['format_version']}, newer than supported")
    return Checkpoint(
        model_state=payload["model"],
        optimizer_state=payload["optimizer"],
        epoch=payload["epoch"],
        config=TrainConfig.from_dict(payload["config"]),
        history=payload.get("history", []),
        manifest_fingerprint=payload.get("manifest_fingerprint", ""),
        format_version=payload["format_version"],
    )


def manifest_fingerprint(manifest: Manifest) -> str:
    h = hashlib.sha256()
    for e in sorted(manifest.entries, key=lambda e: e.image_path):
        h.update(f"{e.image_path}\t{e.label}\n".encode())
    return h.hexdigest()[:16]


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # per-epoch stream so a resumed run draws the same shuffles and flips
    return np.random.default_rng([seed, epoch])


def _make_optimizer(model: PADNet, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(),
        lr=config.initial_lr,
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )


def _existing_entries(manifest: Manifest):
    missing = set(manifest.missing)
    entries = [e for e in manifest.entries if e.image_path not in missing and manifest.resolve(e).is_file()]
    dropped = len(manifest.entries) - len(entries)
    if dropped:
        log.warning("%s: skipping %d sample(s) with missing image files", manifest.name, dropped)
    return entries, dropped


def train(
    config: TrainConfig,
    train_manifest: Manifest,
    log_path=None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
) -> Checkpoint:
    """Fit a model on ``train_manifest`` and return the final checkpoint.

    Per-epoch checkpoints ``epoch_XX.pt`` and ``final.pt`` go to
    ``config.checkpoint_dir`` when set; one JSON line per epoch is appended
    to ``log_path``. ``resume`` continues from a saved epoch checkpoint and
    ``stop_after`` ends the run after that many epochs (both mainly for
    resumability checks).
    """
    config.validate()
    entries, _ = _existing_entries(train_manifest)
    if not entries:
        raise ConfigError(f"training manifest {train_manifest.name!r} has no usable samples")
    entries = balance(entries, config.seed)
    pre = PreprocessConfig.from_backbone(config.backbone_config())
    dataset = ManifestDataset(train_manifest, entries, pre, cache=True)
    labels_all = torch.tensor([e.label for e in entries], dtype=torch.float32)

    seed_everything(config.seed)
    model = PADNet(config.variant, config.backbone_config())
    optimizer = _make_optimizer(model, config)
    history: list[dict] = []
    start = 0
    if resume is not None:
        if resume.config.variant != config.variant:
            raise ConfigError(f"cannot resume a {resume.config.variant!r} checkpoint as {config.variant!r}")
        model.load_state_dict(resume.model_state)
        optimizer.load_state_dict(resume.optimizer_state)
        history = list(resume.history)
        start = resume.epoch + 1

    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    log_fh = open(log_path, "a" if resume else "w", encoding="utf-8") if log_path else None
    fingerprint = manifest_fingerprint(train_manifest)
    end = config.max_epochs if stop_after is None else min(config.max_epochs, start + stop_after)
    ckpt = resume
    try:
        for epoch in range(start, end):
            lr = lr_at(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            rng = _epoch_rng(config.seed, epoch)
            order = rng.permutation(len(dataset))
            flips = rng.random(len(dataset)) < 0.5 if config.augment else np.zeros(len(dataset), bool)
            model.train()
            sums = {"smooth_l1": 0.0, "bce": 0.0, "overall": 0.0}
            seen = 0
            for b0 in range(0, len(order), config.batch_size):
                idx = order[b0 : b0 + config.batch_size]
                x = torch.stack([dataset[i][0] for i in idx])
                f = torch.from_numpy(flips[idx])
                if f.any():
                    x[f] = x[f].flip(-1)
                y = labels_all[idx]
                out = model(x)
                parts = overall_loss(out, y, config.lam)
                if not torch.isfinite(parts.overall):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, batch starting {b0}: "
                        f"smooth_l1={parts.smooth_l1.item()}, bce={parts.bce.item()}, lr={lr}"
                    )
                optimizer.zero_grad(set_to_none=True)
                parts.overall.backward()
                optimizer.step()
                n = len(idx)
                seen += n
                for k in sums:
                    sums[k] += float(getattr(parts, k).detach()) * n
            record = {
                "epoch": epoch,
                "lr": lr,
                "mean_smooth_l1": sums["smooth_l1"] / seen,
                "mean_bce": sums["bce"] / seen,
                "mean_overall": sums["overall"] / seen,
            }
            history.append(record)
            log.info("epoch %d lr %.3g loss %.5f", epoch, lr, record["mean_overall"])
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            ckpt = Checkpoint(
                model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
                optimizer_state=optimizer.state_dict(),
                epoch=epoch,
                config=config,
                history=list(history),
                manifest_fingerprint=fingerprint,
            )
            if ckpt_dir:
                save_checkpoint(ckpt, ckpt_dir / f"epoch_{epoch:02d}.pt")
    finally:
        if log_fh:
            log_fh.close()
    if ckpt_dir and ckpt is not None and end == config.max_epochs:
        save_checkpoint(ckpt, ckpt_dir / "final.pt")
    return ckpt


@torch.no_grad()
def predict(checkpoint: Checkpoint | PADNet, manifest: Manifest, variant: str | None = None, batch_size: int = 64) -> ScoreSet:
    """Score every readable sample of ``manifest`` in inference mode.

    Samples whose image file is missing are skipped and counted in a
    warning; compare ``len(result)`` with ``len(manifest)`` to detect them.
    """
    model = checkpoint.build_model() if isinstance(checkpoint, Checkpoint) else checkpoint
    if variant is not None and variant != model.variant:
        raise ConfigError(f"checkpoint holds a {model.variant!r} model, requested {variant!r}")
    model.eval()
    entries, _ = _existing_entries(manifest)
    pre = PreprocessConfig.from_backbone(model.config)
    ds = ManifestDataset(manifest, entries, pre, cache=False)
    scores = []
    for b0 in range(0, len(ds), batch_size):
        x = torch.stack([ds[i][0] for i in range(b0, min(b0 + batch_size, len(ds)))])
        scores.append(model(x).pa_score.double())
    scores = torch.cat(scores).numpy() if scores else np.zeros(0)
    meta = [
        {
            "sample_path": e.image_path,
            "database": e.database,
            "sensor": e.sensor,
            "attack_type": e.attack_type,
            "known_unknown": e.known_unknown,
        }
        for e in entries
    ]
    return ScoreSet(scores, [e.label for e in entries], meta)

