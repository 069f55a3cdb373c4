"""Contrastive pre-training loop and checkpoint files."""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .. import data as D
from ..rng import child_rng, child_seed, torch_seeded
from .losses import moco_loss, momentum_update, queue_update, simclr_loss
from .models import ARCHITECTURES, ProjectionHead, UnknownArchitectureError, build_encoder

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "encodermi-encoder"


class CorruptCheckpointError(ValueError):
    pass


class EmptySplitError(ValueError):
    pass


ALGORITHMS = ("moco", "simclr")


@dataclasses.dataclass
class ContrastiveConfig:
    algo: str = "moco"
    arch: str = "small-resnet"
    dim: int = 128
    width: int = 32
    epochs: int = 200
    batch_size: int = 256
    base_lr: float = 0.06
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    tau: float | None = None  # None -> 0.07 for moco, 0.5 for simclr
    queue_size: int = 4096
    moco_momentum: float = 0.999
    proj_dim: int = 64
    bn_splits: int = 8
    augmentations: list | None = None  # None -> the algorithm's default pipeline
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ValueError(f"algo: unknown training algorithm {self.algo!r}")
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"arch: unknown architecture {self.arch!r}")
        for name in ("dim", "width", "batch_size", "proj_dim", "bn_splits", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1")
        if self.epochs < 0 or self.queue_size < 0:
            raise ValueError(f"{'epochs' if self.epochs < 0 else 'queue_size'}: must be >= 0")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau: temperature must be positive")
        if not 0.0 <= self.moco_momentum <= 1.0:
            raise ValueError("moco_momentum: must lie in [0, 1]")

    @property
    def temperature(self):
        if self.tau is not None:
            return self.tau
        return 0.07 if self.algo == "moco" else 0.5

    @property
    def lr(self):
        return self.base_lr * self.batch_size / 256

    def pipeline(self) -> D.AugmentationPipeline:
        if self.augmentations is None:
            return D.PIPELINES[self.algo]()
        return D.pipeline_from_kinds(self.augmentations)

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclasses.dataclass
class EncoderCheckpoint:
    epoch: int
    arch: str
    dim: int
    width: int
    state_dict: dict
    config_digest: str
    config: dict = dataclasses.field(default_factory=dict)

    def build(self):
        model = build_encoder(self.arch, dim=self.dim, width=self.width)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def save(self, path):
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "epoch": self.epoch,
            "arch": self.arch,
            "dim": self.dim,
            "width": self.width,
            "config_digest": self.config_digest,
            "config": json.dumps(self.config, sort_keys=True),
            "state_dict": self.state_dict,
        }
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path):
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise CorruptCheckpointError(f"{path} is not an encoder checkpoint")
        try:
            ckpt = cls(
                epoch=int(payload["epoch"]),
                arch=payload["arch"],
                dim=int(payload["dim"]),
                width=int(payload["width"]),
                state_dict=payload["state_dict"],
                config_digest=payload["config_digest"],
                config=json.loads(payload["config"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptCheckpointError(f"checkpoint {path} is missing fields: {exc}") from exc
        build_encoder(ckpt.arch)  # raises UnknownArchitectureError early
        return ckpt


def _to_tensor(batch):
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2)))


def _views(images, idx, pipeline, rng):
    v1 = np.stack([D.augment(images[i], pipeline, rng) for i in idx])
    v2 = np.stack([D.augment(images[i], pipeline, rng) for i in idx])
    return _to_tensor(v1), _to_tensor(v2)


class _Trainer:
    def __init__(self, cfg: ContrastiveConfig, seed):
        self.cfg = cfg
        with torch_seeded(child_seed(seed, "init", cfg.algo, cfg.arch)):
            self.encoder = build_encoder(cfg.arch, cfg.dim, cfg.width, cfg.bn_splits)
            params = list(self.encoder.parameters())
            if cfg.algo == "moco":
                self.key_encoder = copy.deepcopy(self.encoder)
                for p in self.key_encoder.parameters():
                    p.requires_grad_(False)
                self.queue = torch.zeros((0, cfg.dim))
                self.head = None
            else:
                self.head = ProjectionHead(cfg.dim, cfg.dim, cfg.proj_dim)
                params += list(self.head.parameters())
        self.opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.sgd_momentum,
                                   weight_decay=cfg.weight_decay)

    def set_lr(self, epoch):
        lr = self.cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / self.cfg.epochs))
        for group in self.opt.param_groups:
            group["lr"] = lr

    def step(self, x1, x2):
        cfg = self.cfg
        self.encoder.train()
        if cfg.algo == "moco":
            q = self.encoder(x1)
            with torch.no_grad():
                momentum_update(self.encoder, self.key_encoder, cfg.moco_momentum)
                self.key_encoder.train()
                k = self.key_encoder(x2)
            loss = moco_loss(q, k, self.queue, cfg.temperature)
        else:
            self.head.train()
            feats = torch.stack([self.encoder(x1), self.encoder(x2)], dim=1).reshape(-1, cfg.dim)
            loss = simclr_loss(feats, cfg.temperature, self.head)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        if cfg.algo == "moco":
            self.queue = queue_update(self.queue, k, cfg.queue_size)
        return loss.item()

    def state(self):
        st = {"encoder": self.encoder.state_dict(), "opt": self.opt.state_dict()}
        if self.cfg.algo == "moco":
            st["key_encoder"] = self.key_encoder.state_dict()
            st["queue"] = self.queue
        else:
            st["head"] = self.head.state_dict()
        return st

    def load_state(self, st):
        self.encoder.load_state_dict(st["encoder"])
        self.opt.load_state_dict(st["opt"])
        if self.cfg.algo == "moco":
            self.key_encoder.load_state_dict(st["key_encoder"])
            self.queue = st["queue"]
        else:
            self.head.load_state_dict(st["head"])

    def snapshot(self, epoch, digest):
        clean = build_encoder(self.cfg.arch, self.cfg.dim, self.cfg.width)
        clean.load_state_dict(self.encoder.state_dict())
        return EncoderCheckpoint(epoch, self.cfg.arch, self.cfg.dim, self.cfg.width,
                                 {k: v.clone() for k, v in clean.state_dict().items()},
                                 digest, self.cfg.to_dict())


def checkpoint_epochs(epochs, every):
    marks = [e for e in range(every, epochs + 1, every)] if every > 0 else []
    if epochs > 0 and (not marks or marks[-1] != epochs):
        marks.append(epochs)
    return marks


def pretrain_encoder(dataset, split, cfg: ContrastiveConfig, seed, out_dir=None,
                     include_initial=False, stop_after=None):
    """Pre-train an encoder on ``split`` and return its checkpoint series.

    A checkpoint is emitted at every multiple of ``cfg.checkpoint_every`` and
    at the final epoch (plus epoch 0 with ``include_initial``). With
    ``out_dir`` the checkpoints, a resumable training state and
    ``train_log.csv`` are written there, and an interrupted run picks up from
    the last saved state. ``stop_after`` ends this call after that many
    epochs of the schedule, as if the process had been killed there; the
    training state is only persisted at checkpoint epochs.
    """
    if cfg.algo not in ALGORITHMS:
        raise ValueError(f"unknown training algorithm {cfg.algo!r}")
    if split.role not in ("pretrain-member", "shadow-member"):
        raise ValueError(f"cannot pre-train on a {split.role} split")
    if len(split) == 0:
        raise EmptySplitError("pre-training split is empty")
    images = dataset.images(split.indices)
    pipeline = cfg.pipeline()
    digest = cfg.digest()
    trainer = _Trainer(cfg, seed)
    marks = checkpoint_epochs(cfg.epochs, cfg.checkpoint_every)
    out_dir = Path(out_dir) if out_dir is not None else None
    checkpoints, history, start = [], [], 0

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        state_path = out_dir / "train_state.pt"
        if state_path.exists():
            st = torch.load(state_path, map_location="cpu", weights_only=True)
            if st.get("digest") == digest and st.get("seed") == seed:
                trainer.load_state(st["trainer"])
                start = int(st["epoch"])
                history = [tuple(r) for r in st["history"]]
                checkpoints = [EncoderCheckpoint.load(out_dir / f"epoch_{e:04d}.pt")
                               for e in [0] * include_initial + marks if e <= start]
                log.info("resuming pre-training at epoch %d", start)

    if include_initial and start == 0:
        ck = trainer.snapshot(0, digest)
        checkpoints.append(ck)
        if out_dir is not None:
            ck.save(out_dir / "epoch_0000.pt")

    n = len(images)
    for epoch in range(start, cfg.epochs):
        if stop_after is not None and epoch >= stop_after:
            break
        trainer.set_lr(epoch)
        order = child_rng(seed, "order", epoch).permutation(n)
        aug_rng = child_rng(seed, "augment", epoch)
        losses = []
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            if len(idx) < 2:
                continue
            x1, x2 = _views(images, idx, pipeline, aug_rng)
            losses.append(trainer.step(x1, x2))
        history.append((epoch + 1, float(np.mean(losses))))
        log.debug("epoch %d loss %.4f", epoch + 1, history[-1][1])
        if epoch + 1 in marks:
            ck = trainer.snapshot(epoch + 1, digest)
            checkpoints.append(ck)
            if out_dir is not None:
                ck.save(out_dir / f"epoch_{epoch + 1:04d}.pt")
                _write_log(out_dir / "train_log.csv", history)
                tmp = out_dir / "train_state.pt.tmp"
                torch.save({"digest": digest, "seed": seed, "epoch": epoch + 1,
                            "history": history, "trainer": trainer.state()}, tmp)
                tmp.replace(out_dir / "train_state.pt")
    if out_dir is not None:
        _write_log(out_dir / "train_log.csv", history)
    return checkpoints, history


def _write_log(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for epoch, loss in history:
            w.writerow([epoch, f"{loss:.6f}"])


def read_log(path):
    with open(path) as fh:
        return [(int(r["epoch"]), float(r["loss"])) for r in csv.DictReader(fh)]


__all__ = [
    "ContrastiveConfig", "EncoderCheckpoint", "CorruptCheckpointError", "EmptySplitError",
    "UnknownArchitectureError", "pretrain_encoder", "checkpoint_epochs", "read_log",
]
