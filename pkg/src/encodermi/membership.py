"""Membership features: pairwise similarities among encoded augmented views.

For an input x, n augmented views are encoded and the n(n-1)/2 pairwise
similarity scores form the membership feature set. Shadow-member inputs are
labeled 1 and shadow-non-member inputs 0 to build the inference training set.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from . import data as D
from .rng import child_rng

METRICS = ("cosine", "pearson-correlation", "negative-euclidean")
_ALIASES = {"correlation": "pearson-correlation", "pearson": "pearson-correlation",
            "euclidean": "negative-euclidean"}


class DegenerateFeatureError(ValueError):
    """A feature vector for which the similarity metric is undefined."""


class ConfigMismatchError(ValueError):
    pass


def canonical_metric(metric: str) -> str:
    metric = _ALIASES.get(metric, metric)
    if metric not in METRICS:
        raise ValueError(f"unknown similarity metric {metric!r}; expected one of {METRICS}")
    return metric


def _normalize_rows(x, metric):
    if metric == "pearson-correlation":
        x = x - x.mean(axis=-1, keepdims=True)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms <= 1e-12 * max(1.0, float(np.abs(x).max(initial=0.0)))):
        what = "constant vector" if metric == "pearson-correlation" else "zero-norm vector"
        raise DegenerateFeatureError(f"{metric} similarity undefined for a {what}")
    return x / norms


def similarity(metric, a, b) -> float:
    """Similarity of two vectors; larger always means more similar."""
    metric = canonical_metric(metric)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if metric == "negative-euclidean":
        return -float(np.linalg.norm(a - b))
    ua, ub = _normalize_rows(a, metric), _normalize_rows(b, metric)
    return float(np.clip(ua @ ub, -1.0, 1.0))


def pairwise_scores(feats, metric) -> np.ndarray:
    """Upper-triangle (i < j) similarities of the rows of ``feats``, row-major order."""
    metric = canonical_metric(metric)
    x = np.asarray(feats, dtype=np.float64)
    iu = np.triu_indices(len(x), k=1)
    if metric == "negative-euclidean":
        sq = (x * x).sum(1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
        return -np.sqrt(d2[iu])
    u = _normalize_rows(x, metric)
    return np.clip((u @ u.T)[iu], -1.0, 1.0)


@dataclasses.dataclass(frozen=True)
class MembershipFeatureSet:
    scores: np.ndarray
    n: int
    metric: str = "cosine"

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.shape != (self.n * (self.n - 1) // 2,):
            raise ValueError(f"expected {self.n * (self.n - 1) // 2} scores for n={self.n}, "
                             f"got shape {scores.shape}")
        object.__setattr__(self, "scores", scores)

    def ranked(self):
        return np.sort(self.scores)[::-1]

    def average(self):
        return float(self.scores.mean())


@dataclasses.dataclass(frozen=True)
class LabeledMembershipRecord:
    features: MembershipFeatureSet
    label: int
    source_id: int


def extract_membership_features(x, enc, pipeline, n, metric, rng) -> MembershipFeatureSet:
    """Membership features of one image against one (black-box) encoder."""
    if n < 2:
        raise ValueError("need at least two augmented views")
    metric = canonical_metric(metric)
    views = D.augment_views(x, pipeline, rng, n)
    return MembershipFeatureSet(pairwise_scores(enc.embed_batch(views), metric), n, metric)


def view_rng(seed, source, idx):
    return child_rng(seed, "views", source, int(idx))


class FeatureCache:
    """Score arrays on disk keyed by everything that determines them.

    Each entry is ``<key>.npy`` plus a ``<key>.json`` sidecar. Writes go
    through a temporary file and an atomic rename, so concurrent writers of
    the same key are harmless.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(**parts):
        blob = json.dumps(parts, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:24]

    def get(self, key):
        path = self.root / f"{key}.npy"
        if path.exists() and (self.root / f"{key}.json").exists():
            return np.load(path)
        return None

    def put(self, key, array, meta):
        path = self.root / f"{key}.npy"
        if path.exists():
            return
        tmp = self.root / f"{key}.{os.getpid()}.tmp.npy"
        np.save(tmp, array)
        os.replace(tmp, path)
        side = self.root / f"{key}.json.{os.getpid()}.tmp"
        side.write_text(json.dumps(meta, sort_keys=True, default=str))
        os.replace(side, self.root / f"{key}.json")


def extract_many(dataset, ids, enc, pipeline, n, metric, seed, cache=None,
                 images_per_batch=64) -> np.ndarray:
    """Membership score matrix (len(ids), n(n-1)/2) for dataset records.

    Each record draws its views from its own stream derived from
    (seed, dataset name, id), so results do not depend on batching or order.
    """
    metric = canonical_metric(metric)
    ids = [int(i) for i in ids]
    key = None
    if cache is not None:
        meta = dict(source=dataset.name, ids=hashlib.sha256(np.asarray(ids).tobytes()).hexdigest(),
                    encoder=enc.digest(), pipeline=pipeline.digest(), n=n, metric=metric,
                    seed=seed)
        key = FeatureCache.key(**meta)
        hit = cache.get(key)
        if hit is not None:
            return hit
    n_pairs = n * (n - 1) // 2
    out = np.empty((len(ids), n_pairs), dtype=np.float64)
    for b in range(0, len(ids), images_per_batch):
        chunk = ids[b:b + images_per_batch]
        views = np.concatenate([
            D.augment_views(dataset.image(i), pipeline, view_rng(seed, dataset.name, i), n)
            for i in chunk
        ])
        feats = enc.embed_batch(views).reshape(len(chunk), n, -1)
        for k in range(len(chunk)):
            out[b + k] = pairwise_scores(feats[k], metric)
    if cache is not None:
        cache.put(key, out, meta)
    return out


def extract_images(images, enc, pipeline, n, metric, seed, tag="images") -> np.ndarray:
    """Like :func:`extract_many` for an in-memory list of images."""
    ds = D.ArrayDataset(tag, _stack_same(images))
    return extract_many(ds, range(len(ds)), enc, pipeline, n, metric, seed)


def _stack_same(images):
    return np.stack([D.as_image(im) for im in images])


def build_inference_training_set(shadow_enc, dataset, shadow_member, shadow_nonmember,
                                 pipeline, n, metric, seed, cache=None):
    """Label shadow-member features 1 and shadow-non-member features 0."""
    overlap = set(shadow_member.indices) & set(shadow_nonmember.indices)
    if overlap:
        raise D.SplitOverlapError(
            f"shadow member and non-member splits share {len(overlap)} ids")
    metric = canonical_metric(metric)
    records = []
    for split, label in ((shadow_member, 1), (shadow_nonmember, 0)):
        scores = extract_many(dataset, split.indices, shadow_enc, pipeline, n, metric, seed, cache)
        records += [LabeledMembershipRecord(MembershipFeatureSet(s, n, metric), label, i)
                    for s, i in zip(scores, split.indices)]
    return records


def records_to_arrays(records):
    """(scores matrix, labels vector, n, metric) of a record list."""
    if not records:
        raise ValueError("no records")
    ns = {r.features.n for r in records}
    metrics = {r.features.metric for r in records}
    if len(ns) != 1 or len(metrics) != 1:
        raise ConfigMismatchError(f"records mix n={sorted(ns)} / metric={sorted(metrics)}")
    x = np.stack([r.features.scores for r in records])
    y = np.asarray([r.label for r in records], dtype=np.int64)
    return x, y, ns.pop(), metrics.pop()


def records_from_arrays(scores, labels, n, metric, ids=None):
    ids = range(len(scores)) if ids is None else ids
    return [LabeledMembershipRecord(MembershipFeatureSet(s, n, metric), int(l), int(i))
            for s, l, i in zip(scores, labels, ids)]
