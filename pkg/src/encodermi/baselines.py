"""Comparison attacks adapted from classifier membership inference.

A-C go through downstream classifiers built on the encoders, D treats the
raw feature vector as a confidence vector and E scores patch similarity.
Each baseline returns an :class:`Attack` trained on shadow data that is then
pointed at the target.
"""
from __future__ import annotations

import dataclasses
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import data as D
from .classifiers import (
    Attack,
    SingleClassError,
    fit_threshold_on_averages,
    train_vector_on_arrays,
)
from .encoder import BlackBoxEncoder, DimensionMismatchError, LocalEncoder
from .membership import pairwise_scores
from .rng import child_rng, child_seed, torch_seeded

log = logging.getLogger(__name__)


class LabelOutOfRangeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# downstream classifiers

class DownstreamClassifier:
    """Trainable head on top of a frozen encoder."""

    def __init__(self, encoder: BlackBoxEncoder, head: nn.Module, k, mean, std):
        self.encoder = encoder
        self.head = head.eval()
        self.k = k
        self.mean = torch.as_tensor(mean, dtype=torch.float32)
        self.std = torch.as_tensor(std, dtype=torch.float32)
        self.test_accuracy = None

    def _head_logits(self, feats):
        return self.head((feats - self.mean) / self.std)

    @torch.no_grad()
    def confidences(self, images) -> np.ndarray:
        feats = torch.as_tensor(self.encoder.embed_batch(images))
        return torch.softmax(self._head_logits(feats), dim=1).numpy()

    def predict(self, images) -> np.ndarray:
        return self.confidences(images).argmax(axis=1)

    def torch_logits(self, x):
        """Differentiable logits of an NCHW batch; needs a local encoder."""
        if not isinstance(self.encoder, LocalEncoder):
            raise TypeError("white-box gradients need a local encoder")
        return self._head_logits(self.encoder.model(x))


def _features(enc, dataset, ids, batch=256):
    ids = list(ids)
    if not ids:
        return np.zeros((0, enc.dim), dtype=np.float32)
    return np.concatenate([enc.embed_batch(dataset.images(ids[b:b + batch]))
                           for b in range(0, len(ids), batch)])


def train_downstream(enc, dataset, train_split, test_split, k, seed, epochs=100, lr=1e-3,
                     batch_size=256, hidden=512):
    """Fit a 2-layer MLP head on frozen features; returns (classifier, test accuracy)."""
    y_train = np.asarray([dataset.label(i) for i in train_split.indices])
    if len(y_train) and (y_train.min() < 0 or y_train.max() >= k):
        raise LabelOutOfRangeError(f"labels must lie in [0, {k}), got range "
                                   f"[{y_train.min()}, {y_train.max()}]")
    if len(np.unique(y_train)) < 2:
        raise SingleClassError("downstream training data has a single class")
    x_train = torch.as_tensor(_features(enc, dataset, train_split.indices))
    mean = x_train.mean(0)
    std = x_train.std(0).clamp_min(1e-6)
    with torch_seeded(child_seed(seed, "downstream-init")):
        head = nn.Sequential(nn.Linear(enc.dim, hidden), nn.ReLU(), nn.Linear(hidden, k))
    xs = (x_train - mean) / std
    yt = torch.as_tensor(y_train, dtype=torch.long)
    gen = torch.Generator().manual_seed(child_seed(seed, "downstream-batches"))
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    head.train()
    for _ in range(epochs):
        perm = torch.randperm(len(xs), generator=gen)
        for b in range(0, len(xs), batch_size):
            idx = perm[b:b + batch_size]
            opt.zero_grad()
            F.cross_entropy(head(xs[idx]), yt[idx]).backward()
            opt.step()
    clf = DownstreamClassifier(enc, head, k, mean, std)
    if test_split is not None and len(test_split):
        y_test = np.asarray([dataset.label(i) for i in test_split.indices])
        x_test = torch.as_tensor(_features(enc, dataset, test_split.indices))
        with torch.no_grad():
            pred = clf._head_logits(x_test).argmax(1).numpy()
        clf.test_accuracy = float((pred == y_test).mean())
    return clf, clf.test_accuracy


def _shadow_labels(shadow_member, shadow_nonmember):
    return np.r_[np.ones(len(shadow_member), int), np.zeros(len(shadow_nonmember), int)]


def _shadow_ids(shadow_member, shadow_nonmember):
    return list(shadow_member.indices) + list(shadow_nonmember.indices)


def _train_vector(x, y, seed, rank, clf_kwargs):
    return train_vector_on_arrays(x, y, seed, rank=rank, **(clf_kwargs or {}))


# -- A: ranked confidence vectors -------------------------------------------

def confidence_features(down: DownstreamClassifier, dataset, ids, batch=256):
    ids = list(ids)
    conf = np.concatenate([down.confidences(dataset.images(ids[b:b + batch]))
                           for b in range(0, len(ids), batch)]) if ids else np.zeros((0, down.k))
    return -np.sort(-conf, axis=1)


def baseline_a(shadow_down, target_down, dataset, shadow_member, shadow_nonmember, seed,
               clf_kwargs=None) -> Attack:
    ids = _shadow_ids(shadow_member, shadow_nonmember)
    x = confidence_features(shadow_down, dataset, ids)
    clf = _train_vector(x, _shadow_labels(shadow_member, shadow_nonmember), seed, True, clf_kwargs)
    return Attack("baseline-a", clf, lambda ds, ids: confidence_features(target_down, ds, ids))


# -- B: label-only correctness bits ---------------------------------------

def correctness_bits(down, dataset, ids, e, pipeline, seed):
    """(len(ids), e+1) bits: bit 0 for the clean input, bit i for view i."""
    if not dataset.has_labels:
        raise D.MissingLabelsError(
            f"baseline B needs ground-truth labels; dataset {dataset.name!r} has none")
    rows = []
    for i in ids:
        img = dataset.image(i)
        rng = child_rng(seed, "baseline-b", dataset.name, int(i))
        batch = np.concatenate([img[None], D.augment_views(img, pipeline, rng, e)])
        rows.append(down.predict(batch) == dataset.label(i))
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), e + 1)


def baseline_b(shadow_down, target_down, dataset, shadow_member, shadow_nonmember, seed,
               e=10, pipeline=None, clf_kwargs=None) -> Attack:
    pipeline = pipeline or D.moco_v1_pipeline()
    ids = _shadow_ids(shadow_member, shadow_nonmember)
    x = correctness_bits(shadow_down, dataset, ids, e, pipeline, seed)
    clf = _train_vector(x, _shadow_labels(shadow_member, shadow_nonmember), seed, False, clf_kwargs)
    return Attack("baseline-b", clf,
                  lambda ds, ids: correctness_bits(target_down, ds, ids, e, pipeline, seed))


# -- C: targeted adversarial examples -------------------------------------

@dataclasses.dataclass(frozen=True)
class AdvExampleConfig:
    epsilon: float = 8 / 255
    step_size: float | None = None  # None -> epsilon / 10
    iterations: int = 20
    random_start: bool = True

    @property
    def step(self):
        return self.epsilon / 10 if self.step_size is None else self.step_size


def pgd_targeted(logits_fn, x, target, cfg: AdvExampleConfig, generator=None):
    """Targeted L-inf PGD: minimize cross-entropy towards ``target``.

    ``x`` is an NCHW tensor in [0, 1]; the result stays in the eps-ball around
    ``x`` and in [0, 1].
    """
    x = x.detach()
    eps = cfg.epsilon
    if cfg.random_start and eps > 0:
        noise = torch.rand(x.shape, generator=generator) * 2 * eps - eps
        adv = (x + noise).clamp(0, 1)
    else:
        adv = x.clone()
    for _ in range(cfg.iterations):
        adv.requires_grad_(True)
        loss = F.cross_entropy(logits_fn(adv), target)
        (grad,) = torch.autograd.grad(loss, adv)
        with torch.no_grad():
            adv = adv - cfg.step * grad.sign()
            adv = torch.min(torch.max(adv, x - eps), x + eps).clamp(0, 1)
    return adv.detach()


def adversarial_views(shadow_down, images, cfg: AdvExampleConfig, seed):
    """k targeted adversarial examples per image, shape (N, k, H, W, C)."""
    k = shadow_down.k
    x = torch.from_numpy(np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2)))
    n = len(x)
    xr = x.repeat_interleave(k, dim=0)
    targets = torch.arange(k).repeat(n)
    gen = torch.Generator().manual_seed(child_seed(seed, "pgd"))
    model = shadow_down.encoder.model
    was_training = model.training
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        adv = pgd_targeted(shadow_down.torch_logits, xr, targets, cfg, gen)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
        model.train(was_training)
    return adv.numpy().transpose(0, 2, 3, 1).reshape(n, k, *x.shape[2:], x.shape[1])


def adversarial_features(shadow_down, query_down, dataset, ids, cfg, seed, batch=32):
    """Concatenated confidence vectors (k * k) of the k adversarial examples."""
    k = query_down.k
    rows = []
    ids = list(ids)
    for b in range(0, len(ids), batch):
        chunk = ids[b:b + batch]
        adv = adversarial_views(shadow_down, dataset.images(chunk), cfg, child_seed(seed, b))
        conf = query_down.confidences(adv.reshape(-1, *adv.shape[2:]))
        rows.append(conf.reshape(len(chunk), k * k))
    return np.concatenate(rows) if rows else np.zeros((0, k * k))


def baseline_c(shadow_down, target_down, dataset, shadow_member, shadow_nonmember, seed,
               adv=AdvExampleConfig(), clf_kwargs=None) -> Attack:
    """Adversarial examples are crafted on the shadow pipeline (white-box) and
    scored by the downstream classifier of whichever encoder is attacked."""
    if shadow_down.k < 2:
        raise ValueError("baseline C needs at least two classes")
    ids = _shadow_ids(shadow_member, shadow_nonmember)
    x = adversarial_features(shadow_down, shadow_down, dataset, ids, adv, seed)
    clf = _train_vector(x, _shadow_labels(shadow_member, shadow_nonmember), seed, False, clf_kwargs)
    return Attack("baseline-c", clf,
                  lambda ds, ids: adversarial_features(shadow_down, target_down, ds, ids, adv, seed))


# -- D: raw feature vectors -----------------------------------------------

def baseline_d(shadow_enc, target_enc, dataset, shadow_member, shadow_nonmember, seed,
               clf_kwargs=None) -> Attack:
    if shadow_enc.dim != target_enc.dim:
        raise DimensionMismatchError(
            f"shadow encoder dim {shadow_enc.dim} != target encoder dim {target_enc.dim}")
    ids = _shadow_ids(shadow_member, shadow_nonmember)
    x = _features(shadow_enc, dataset, ids)
    clf = _train_vector(x, _shadow_labels(shadow_member, shadow_nonmember), seed, False, clf_kwargs)
    return Attack("baseline-d", clf, lambda ds, ids: _features(target_enc, ds, ids))


# -- E: patch similarity ----------------------------------------------------

GRIDS = {"3x1": (3, 1), "3x3": (3, 3), "3x5": (3, 5)}


def image_patches(image, grid, out_size):
    """Row-major grid patches, floor-divided (remainder rows/cols dropped), resized."""
    rows, cols = GRIDS[grid] if isinstance(grid, str) else grid
    h, w = image.shape[:2]
    ph, pw = h // rows, w // cols
    if ph < 1 or pw < 1:
        raise ValueError(f"image {h}x{w} too small for a {rows}x{cols} grid")
    return np.stack([
        D.resize(image[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw], out_size, out_size)
        for r in range(rows) for c in range(cols)
    ])


def patch_similarity(enc, image, grid):
    """Average cosine between the center patch and every other patch."""
    patches = image_patches(image, grid, enc.resolution or image.shape[0])
    feats = enc.embed_batch(patches)
    center = len(patches) // 2
    sims = pairwise_scores(feats, "cosine")
    n = len(patches)
    iu = np.triu_indices(n, k=1)
    matrix = np.zeros((n, n))
    matrix[iu] = sims
    matrix = matrix + matrix.T
    others = [j for j in range(n) if j != center]
    return float(matrix[center, others].mean())


def patch_features(enc, dataset, ids, grid):
    return np.asarray([patch_similarity(enc, dataset.image(i), grid) for i in ids])


def baseline_e(shadow_enc, target_enc, dataset, shadow_member, shadow_nonmember, grid="3x3"
               ) -> Attack:
    ids = _shadow_ids(shadow_member, shadow_nonmember)
    avgs = patch_features(shadow_enc, dataset, ids, grid)
    clf = fit_threshold_on_averages(avgs, _shadow_labels(shadow_member, shadow_nonmember))
    return Attack(f"baseline-e-{grid}", clf,
                  lambda ds, ids: patch_features(target_enc, ds, ids, grid))


__all__ = [
    "AdvExampleConfig", "Attack", "DownstreamClassifier", "LabelOutOfRangeError",
    "adversarial_features", "baseline_a", "baseline_b", "baseline_c", "baseline_d",
    "baseline_e", "confidence_features", "correctness_bits", "image_patches",
    "patch_similarity", "pgd_targeted", "train_downstream",
]
