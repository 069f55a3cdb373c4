"""Metrics, curves and the studies built on them."""
from __future__ import annotations

import dataclasses
import itertools
import logging
from typing import Callable, Sequence

import numpy as np

from .classifiers import Attack, InferenceClassifier
from .contrastive.training import EmptySplitError
from .encoder import from_checkpoint
from .membership import extract_many

log = logging.getLogger(__name__)


class MissingCheckpointError(KeyError):
    pass


class MissingAssetError(LookupError):
    pass


# ---------------------------------------------------------------------------
# background knowledge

_ALT_ARCH = {"small-resnet": "small-vgg", "small-vgg": "small-resnet"}
_ALT_ALGO = {"moco": "simclr", "simclr": "moco"}
DEFAULT_SWAP = {"cifar10": "stl10", "tiny-imagenet": "stl10", "stl10": "cifar10",
                "synthetic-shapes": "synthetic-textures",
                "synthetic-textures": "synthetic-shapes"}


@dataclasses.dataclass(frozen=True)
class BackgroundKnowledge:
    """Whether the inferrer knows the data distribution, architecture, algorithm."""

    P: bool
    E: bool
    T: bool

    @classmethod
    def all(cls):
        """The eight settings, from no knowledge to full knowledge."""
        order = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (1, 0, 1), (0, 1, 1),
                 (1, 1, 1)]
        return [cls(bool(p), bool(e), bool(t)) for p, e, t in order]

    @classmethod
    def parse(cls, text):
        """From "yyn", "1,1,0" or "yes,yes,no"."""
        raw = text.replace(",", "").replace("yes", "y").replace("no", "n").lower()
        if len(raw) != 3 or any(c not in "yn10" for c in raw):
            raise ValueError(f"cannot parse background knowledge {text!r}")
        return cls(*(c in "y1" for c in raw))

    @property
    def tag(self):
        return "".join("y" if v else "n" for v in (self.P, self.E, self.T))

    def shadow_config(self, dataset, arch, algo, swap=None):
        """Shadow (dataset, arch, algo, query pipeline name) for a target."""
        swap = {**DEFAULT_SWAP, **(swap or {})}
        return {
            "dataset": dataset if self.P else swap[dataset],
            "arch": arch if self.E else _ALT_ARCH[arch],
            "algo": algo if self.T else _ALT_ALGO[algo],
            "query_pipeline": None if self.T else "crop-only",
        }


# ---------------------------------------------------------------------------
# reports

def _ratio(num, den):
    return num / den if den else None


@dataclasses.dataclass
class EvaluationReport:
    method: str
    tp: int
    fp: int
    tn: int
    fn: int
    knowledge: str | None = None
    seed: int | None = None
    trial: int | None = None
    pr_curve: list | None = None
    extra: dict = dataclasses.field(default_factory=dict)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self):
        return _ratio(self.tp + self.tn, self.total)

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return _ratio(self.tp, self.tp + self.fn)

    @classmethod
    def from_predictions(cls, pred, labels, method, **kw):
        pred = np.asarray(pred).astype(bool)
        labels = np.asarray(labels).astype(bool)
        return cls(method,
                   tp=int((pred & labels).sum()), fp=int((pred & ~labels).sum()),
                   tn=int((~pred & ~labels).sum()), fn=int((~pred & labels).sum()), **kw)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d.update(accuracy=self.accuracy, precision=self.precision, recall=self.recall)
        return d

    @classmethod
    def from_dict(cls, d):
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})


def encodermi_attack(clf: InferenceClassifier, target_enc, pipeline, n, metric, seed,
                     cache=None, name=None) -> Attack:
    """Wrap an EncoderMI classifier so it featurizes records via the target."""
    clf.check_config(n, metric)
    return Attack(name or f"encodermi-{clf.kind}", clf,
                  lambda ds, ids: extract_many(ds, ids, target_enc, pipeline, n, metric, seed,
                                               cache))


def evaluate_attack(attack: Attack, dataset, eval_member, eval_nonmember, with_curve=False,
                    nonmember_dataset=None, grid_size=101, **kw) -> EvaluationReport:
    """Accuracy/precision/recall of an attack on labeled evaluation records.

    ``nonmember_dataset`` lets members and non-members come from different
    sources (e.g. the train and test partitions of one benchmark).
    """
    if not len(eval_member) or not len(eval_nonmember):
        raise EmptySplitError("evaluation needs non-empty member and non-member splits")
    nds = nonmember_dataset or dataset
    feats_m = attack.featurize(dataset, list(eval_member.indices))
    feats_n = attack.featurize(nds, list(eval_nonmember.indices))
    feats = np.concatenate([feats_m, feats_n])
    labels = np.r_[np.ones(len(eval_member), int), np.zeros(len(eval_nonmember), int)]
    pred = attack.classifier.predict(feats)
    report = EvaluationReport.from_predictions(pred, labels, attack.name, **kw)
    if with_curve:
        probs = getattr(attack.classifier, "kind", None) != "threshold"
        report.pr_curve = pr_curve_from_scores(attack.classifier.member_score(feats), labels,
                                               grid_size, probabilities=probs)
    return report


def evaluate(clf, target_enc, dataset, eval_member, eval_nonmember, pipeline, n=10,
             metric="cosine", seed=0, **kw) -> EvaluationReport:
    """Evaluate an EncoderMI classifier against a target encoder."""
    attack = encodermi_attack(clf, target_enc, pipeline, n, metric, seed)
    return evaluate_attack(attack, dataset, eval_member, eval_nonmember, **kw)


def pr_curve_from_scores(scores, labels, grid_size=101, probabilities=True):
    """(cutoff, precision, recall) for "score >= cutoff means member".

    Probability scores sweep [0, 1]; other scores sweep from their minimum
    to just above their maximum. Precision is None when nothing is
    predicted a member.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if probabilities:
        lo, hi = 0.0, 1.0
    else:
        lo, hi = float(scores.min()), float(scores.max())
        hi = hi + max(1e-9, 1e-6 * abs(hi))
    out = []
    for c in np.linspace(lo, hi, grid_size):
        pred = scores >= c
        tp = int((pred & labels).sum())
        fp = int((pred & ~labels).sum())
        out.append((float(c), _ratio(tp, tp + fp), _ratio(tp, int(labels.sum()))))
    return out


def pr_curve(attack: Attack, dataset, eval_member, eval_nonmember, grid_size=101,
             nonmember_dataset=None):
    rep = evaluate_attack(attack, dataset, eval_member, eval_nonmember, with_curve=True,
                          grid_size=grid_size, nonmember_dataset=nonmember_dataset)
    return rep.pr_curve


# ---------------------------------------------------------------------------
# overfitting and early stopping

def overfitting_monitor(checkpoints, dataset, member_ids, nonmember_ids, pipeline, n=10,
                        seed=0, nonmember_dataset=None, resolution=None):
    """Per checkpoint: (epoch, mean member avg-similarity, mean non-member avg-similarity).

    Each input contributes the average of its pairwise cosine scores; those
    averages are then averaged over members and over non-members.
    """
    if len(checkpoints) < 2:
        raise ValueError("need at least two checkpoints")
    if not len(member_ids) or not len(nonmember_ids):
        raise EmptySplitError("member and non-member samples must be non-empty")
    nds = nonmember_dataset or dataset
    res = resolution or dataset.resolution or 32
    rows = []
    for ck in checkpoints:
        enc = from_checkpoint(ck, res)
        m = extract_many(dataset, member_ids, enc, pipeline, n, "cosine", seed).mean(axis=1)
        nm = extract_many(nds, nonmember_ids, enc, pipeline, n, "cosine", seed).mean(axis=1)
        rows.append((ck.epoch, float(m.mean()), float(nm.mean())))
    return rows


def early_stopping_study(epoch_grid, run_epoch: Callable[[int], tuple]):
    """Rows of (epoch, inference accuracy, downstream accuracy).

    ``run_epoch(epoch)`` evaluates EncoderMI-V against the target checkpoint
    of that epoch and trains/scores a downstream classifier on it; it raises
    :class:`MissingCheckpointError` when the checkpoint does not exist.
    """
    rows = []
    for epoch in epoch_grid:
        inf_acc, down_acc = run_epoch(int(epoch))
        rows.append((int(epoch), float(inf_acc), float(down_acc)))
    return rows


# ---------------------------------------------------------------------------
# grids

@dataclasses.dataclass
class CellSummary:
    knowledge: str
    method: str
    reports: list

    def _stat(self, name):
        vals = [getattr(r, name) for r in self.reports if getattr(r, name) is not None]
        if not vals:
            return None, None
        return float(np.mean(vals)), float(np.std(vals)) if len(vals) > 1 else 0.0

    def summary(self):
        out = {"knowledge": self.knowledge, "method": self.method, "trials": len(self.reports)}
        for name in ("accuracy", "precision", "recall"):
            mean, std = self._stat(name)
            out[f"{name}_mean"], out[f"{name}_std"] = mean, std
        return out


def study_grid(knowledge: Sequence[BackgroundKnowledge], methods: Sequence[str], trials: int,
               run_cell: Callable, root_seed=0):
    """Run ``run_cell(knowledge, method, trial, seed)`` over the grid.

    Trial t uses seed ``root_seed + t``. Returns one CellSummary per
    (knowledge, method) cell in grid order.
    """
    cells = []
    for bk, method in itertools.product(knowledge, methods):
        reports = []
        for t in range(trials):
            try:
                rep = run_cell(bk, method, t, root_seed + t)
            except (FileNotFoundError, MissingCheckpointError, MissingAssetError) as exc:
                raise MissingAssetError(f"cell {bk.tag}/{method}: {exc}") from exc
            rep.knowledge, rep.method, rep.trial, rep.seed = bk.tag, method, t, root_seed + t
            reports.append(rep)
        cells.append(CellSummary(bk.tag, method, reports))
    return cells
