"""Inference classifiers and end-to-end membership inference.

Three classifier kinds consume membership features:

* ``vector`` (EncoderMI-V): an MLP over the descending-sorted score vector;
* ``set`` (EncoderMI-S): a DeepSets network over the unordered scores;
* ``threshold`` (EncoderMI-T): "average score >= theta* means member".
"""
from __future__ import annotations

import dataclasses
import logging

import numpy as np
import torch
import torch.nn as nn

from .membership import (
    ConfigMismatchError,
    canonical_metric,
    extract_membership_features,
    records_to_arrays,
)
from .rng import child_seed, torch_seeded

log = logging.getLogger(__name__)

MEMBER, NON_MEMBER = "member", "non-member"


class SingleClassError(ValueError):
    pass


class UntrainedClassifierError(RuntimeError):
    pass


def _check_labels(y):
    classes = set(np.unique(y).tolist())
    if not classes <= {0, 1}:
        raise ValueError(f"labels must be 0/1, got {sorted(classes)}")
    if len(classes) < 2:
        raise SingleClassError("training data must contain both members and non-members")
    frac = float(np.mean(y))
    if abs(frac - 0.5) > 0.1:
        log.warning("unbalanced inference training set: %.1f%% members", 100 * frac)


class InferenceClassifier:
    kind: str
    n: int | None = None
    metric: str | None = None

    def member_score(self, scores: np.ndarray) -> np.ndarray:
        """Larger means more likely a member. ``scores`` is (M, n(n-1)/2)."""
        raise NotImplementedError

    def predict(self, scores: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def check_config(self, n, metric):
        if self.n is not None and n != self.n:
            raise ConfigMismatchError(f"classifier trained with n={self.n}, extraction uses n={n}")
        if self.metric is not None and canonical_metric(metric) != self.metric:
            raise ConfigMismatchError(
                f"classifier trained with metric={self.metric}, extraction uses {metric}")


# ---------------------------------------------------------------------------
# neural classifiers

def _mlp(in_dim, hidden=256):
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.ReLU(),
        nn.Linear(hidden, hidden), nn.ReLU(),
        nn.Linear(hidden, 2),
    )


class DeepSet(nn.Module):
    """phi on each scalar element, sum pooling, rho on the pooled vector."""

    def __init__(self, hidden=64):
        super().__init__()
        self.phi = nn.Sequential(nn.Linear(1, hidden), nn.ReLU(),
                                 nn.Linear(hidden, hidden), nn.ReLU())
        self.rho = nn.Sequential(nn.Linear(hidden, hidden), nn.ReLU(),
                                 nn.Linear(hidden, hidden), nn.ReLU(),
                                 nn.Linear(hidden, 2))

    def forward(self, x):
        # x: (B, set_size)
        return self.rho(self.phi(x.unsqueeze(-1)).sum(dim=1))


class _NeuralClassifier(InferenceClassifier):
    """Shared plumbing: a torch net plus a scalar input standardization.

    Standardizing with one global mean/std (not per position) keeps the
    set network permutation invariant and the vector network's input order
    meaningful.
    """

    def __init__(self, net, in_dim, n=None, metric=None, mean=0.0, std=1.0):
        self.net = net.eval()
        self.in_dim = in_dim
        self.n = n
        self.metric = metric
        self.mean = float(mean)
        self.std = float(std)

    def _prepare(self, x):
        return x

    @torch.no_grad()
    def logits(self, x):
        x = self._prepare(np.asarray(x, dtype=np.float64))
        t = torch.as_tensor((x - self.mean) / self.std, dtype=torch.float32)
        return self.net(t).numpy()

    def member_score(self, x):
        lg = self.logits(x)
        return torch.softmax(torch.as_tensor(lg, dtype=torch.float64), dim=1)[:, 1].numpy()

    def predict(self, x):
        lg = self.logits(x)
        return (lg[:, 1] > lg[:, 0]).astype(np.int64)

    def state(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "n": self.n, "metric": self.metric,
                "mean": self.mean, "std": self.std, "state_dict": self.net.state_dict()}


class VectorClassifier(_NeuralClassifier):
    """MLP with two hidden layers of 256 units; optionally ranks its input."""

    kind = "vector"

    def __init__(self, net, in_dim, n=None, metric=None, mean=0.0, std=1.0, rank=True):
        super().__init__(net, in_dim, n, metric, mean, std)
        self.rank = rank

    def _prepare(self, x):
        if x.shape[1] != self.in_dim:
            raise ConfigMismatchError(f"expected {self.in_dim} features, got {x.shape[1]}")
        return -np.sort(-x, axis=1) if self.rank else x

    def state(self):
        return {**super().state(), "rank": self.rank}


class SetClassifier(_NeuralClassifier):
    kind = "set"


def _train_net(net, x, y, seed, epochs, lr, batch_size):
    xt = torch.as_tensor(x, dtype=torch.float32)
    yt = torch.as_tensor(y, dtype=torch.long)
    gen = torch.Generator().manual_seed(child_seed(seed, "batches"))
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    net.train()
    for _ in range(epochs):
        perm = torch.randperm(len(xt), generator=gen)
        for b in range(0, len(xt), batch_size):
            idx = perm[b:b + batch_size]
            opt.zero_grad()
            loss_fn(net(xt[idx]), yt[idx]).backward()
            opt.step()
    return net.eval()


def _fit_stats(x):
    std = float(x.std())
    return float(x.mean()), std if std > 1e-12 else 1.0


def train_vector_on_arrays(x, y, seed, epochs=300, lr=1e-4, batch_size=128, rank=True,
                           n=None, metric=None, hidden=256):
    """Train the vector classifier on an arbitrary feature matrix."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check_labels(y)
    if rank:
        x = -np.sort(-x, axis=1)
    mean, std = _fit_stats(x)
    with torch_seeded(child_seed(seed, "vector-init")):
        net = _mlp(x.shape[1], hidden)
    _train_net(net, (x - mean) / std, y, seed, epochs, lr, batch_size)
    return VectorClassifier(net, x.shape[1], n, metric, mean, std, rank)


def train_vector_classifier(records, seed, epochs=300, lr=1e-4, batch_size=128):
    x, y, n, metric = records_to_arrays(records)
    return train_vector_on_arrays(x, y, seed, epochs, lr, batch_size, rank=True, n=n, metric=metric)


def train_set_classifier(records, seed, epochs=300, lr=1e-4, batch_size=128, hidden=64):
    x, y, n, metric = records_to_arrays(records)
    _check_labels(y)
    mean, std = _fit_stats(x)
    with torch_seeded(child_seed(seed, "set-init")):
        net = DeepSet(hidden)
    _train_net(net, (x - mean) / std, y, seed, epochs, lr, batch_size)
    return SetClassifier(net, x.shape[1], n, metric, mean, std)


# ---------------------------------------------------------------------------
# threshold classifier

class ThresholdClassifier(InferenceClassifier):
    kind = "threshold"

    def __init__(self, theta, n=None, metric=None, fit_accuracy=None):
        self.theta = float(theta)
        self.n = n
        self.metric = metric
        self.fit_accuracy = fit_accuracy

    def member_score(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x.mean(axis=1) if x.ndim == 2 else x

    def predict(self, x):
        return (self.member_score(x) >= self.theta).astype(np.int64)

    def state(self):
        return {"kind": self.kind, "theta": self.theta, "n": self.n, "metric": self.metric,
                "fit_accuracy": self.fit_accuracy}


def threshold_candidates(averages):
    u = np.unique(np.asarray(averages, dtype=np.float64))
    return np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2, [np.inf]])


def threshold_accuracies(averages, labels, candidates):
    """Fitting accuracy of "avg >= theta means member" for every candidate."""
    a = np.asarray(averages, dtype=np.float64)
    y = np.asarray(labels)
    mem = np.sort(a[y == 1])
    non = np.sort(a[y == 0])
    members_ge = len(mem) - np.searchsorted(mem, candidates, side="left")
    nonmembers_lt = np.searchsorted(non, candidates, side="left")
    return (members_ge + nonmembers_lt) / len(a)


def fit_threshold_on_averages(averages, labels, n=None, metric=None) -> ThresholdClassifier:
    """theta* minimizing misclassified shadow members plus non-members.

    Candidates are midpoints between adjacent distinct averages and the two
    infinite sentinels; ties go to the smallest theta.
    """
    y = np.asarray(labels)
    if len(set(y.tolist())) < 2:
        raise SingleClassError("threshold fitting needs both members and non-members")
    cands = threshold_candidates(averages)
    acc = threshold_accuracies(averages, y, cands)
    best = int(np.argmax(acc))
    return ThresholdClassifier(cands[best], n, metric, float(acc[best]))


def fit_threshold(records) -> ThresholdClassifier:
    x, y, n, metric = records_to_arrays(records)
    return fit_threshold_on_averages(x.mean(axis=1), y, n, metric)


@dataclasses.dataclass
class Attack:
    """A trained inference classifier bundled with its target-side feature path.

    ``featurize(dataset, ids)`` maps records to the classifier's input.
    """

    name: str
    classifier: object
    featurize: object

    def member_scores(self, dataset, ids):
        return self.classifier.member_score(self.featurize(dataset, ids))

    def predict(self, dataset, ids):
        return self.classifier.predict(self.featurize(dataset, ids))


# ---------------------------------------------------------------------------
# persistence and inference

def save_classifier(clf, path):
    torch.save(clf.state(), path)


def load_classifier(path) -> InferenceClassifier:
    st = torch.load(path, map_location="cpu", weights_only=True)
    kind = st["kind"]
    if kind == "threshold":
        return ThresholdClassifier(st["theta"], st["n"], st["metric"], st["fit_accuracy"])
    if kind == "vector":
        net = _mlp(st["in_dim"], st["state_dict"]["0.weight"].shape[0])
        net.load_state_dict(st["state_dict"])
        return VectorClassifier(net, st["in_dim"], st["n"], st["metric"], st["mean"], st["std"],
                                st["rank"])
    if kind == "set":
        net = DeepSet(st["state_dict"]["phi.0.weight"].shape[0])
        net.load_state_dict(st["state_dict"])
        return SetClassifier(net, st["in_dim"], st["n"], st["metric"], st["mean"], st["std"])
    raise ValueError(f"unknown classifier kind {kind!r}")


def infer_membership(x, target_enc, clf: InferenceClassifier, pipeline, n, metric, rng) -> str:
    """Extract features from the target encoder and classify one input."""
    if clf is None:
        raise UntrainedClassifierError("no classifier given")
    clf.check_config(n, metric)
    feats = extract_membership_features(x, target_enc, pipeline, n, metric, rng)
    label = int(clf.predict(feats.scores[None])[0])
    return MEMBER if label == 1 else NON_MEMBER


def train_classifier(kind, records, seed, **kwargs) -> InferenceClassifier:
    if kind == "vector":
        return train_vector_classifier(records, seed, **kwargs)
    if kind == "set":
        return train_set_classifier(records, seed, **kwargs)
    if kind == "threshold":
        return fit_threshold(records)
    raise ValueError(f"unknown classifier kind {kind!r}")
