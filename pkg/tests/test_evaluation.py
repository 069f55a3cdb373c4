import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from encodermi import data as D
from encodermi.classifiers import Attack, ThresholdClassifier
from encodermi.contrastive import ContrastiveConfig, EmptySplitError, pretrain_encoder
from encodermi.evaluation import (
    BackgroundKnowledge,
    EvaluationReport,
    MissingAssetError,
    MissingCheckpointError,
    early_stopping_study,
    evaluate,
    evaluate_attack,
    overfitting_monitor,
    pr_curve,
    pr_curve_from_scores,
    study_grid,
)
from encodermi.membership import extract_many

from .conftest import constant_encoder


def _split(ids, role="eval-member"):
    return D.DatasetSplit("x", role, tuple(ids))


def _fixed_attack(member_scores, kind_threshold=0.5):
    """Attack whose per-record score is looked up from a table by id."""
    table = np.asarray(member_scores, dtype=np.float64)
    return Attack("fixed", ThresholdClassifier(kind_threshold),
                  lambda ds, ids: table[np.asarray(ids)])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_metric_identities(tp, fp, tn, fn):
    r = EvaluationReport("m", tp, fp, tn, fn)
    total = tp + fp + tn + fn
    assert r.accuracy == (None if total == 0 else (tp + tn) / total)
    assert r.precision == (None if tp + fp == 0 else tp / (tp + fp))
    assert r.recall == (None if tp + fn == 0 else tp / (tp + fn))
    back = EvaluationReport.from_dict(r.to_dict())
    assert (back.accuracy, back.precision, back.recall) == (r.accuracy, r.precision, r.recall)


def test_all_member_and_perfect_classifiers():
    ds = None
    m, n = _split(range(10)), _split(range(10, 20), "eval-nonmember")
    all_member = evaluate_attack(_fixed_attack(np.ones(20)), ds, m, n)
    assert (all_member.accuracy, all_member.recall, all_member.precision) == (0.5, 1.0, 0.5)
    perfect = evaluate_attack(_fixed_attack(np.r_[np.ones(10), np.zeros(10)]), ds, m, n)
    assert (perfect.accuracy, perfect.precision, perfect.recall) == (1.0, 1.0, 1.0)
    none = evaluate_attack(_fixed_attack(np.zeros(20)), ds, m, n)
    assert none.precision is None and none.tn == 10 and none.fn == 10
    assert none.to_dict()["precision"] is None


def test_empty_split_rejected():
    with pytest.raises(EmptySplitError):
        evaluate_attack(_fixed_attack(np.ones(3)), None, _split([]), _split([0]))


def test_pr_curve_endpoints_and_monotone_recall():
    rng = np.random.default_rng(0)
    scores = rng.uniform(size=40)
    labels = rng.integers(0, 2, size=40)
    curve = pr_curve_from_scores(scores, labels, grid_size=51)
    assert len(curve) == 51
    cut0, prec0, rec0 = curve[0]
    assert cut0 == 0.0 and rec0 == 1.0 and prec0 == pytest.approx(labels.mean())
    above = pr_curve_from_scores(scores, labels, 11, probabilities=False)
    assert above[-1][0] > scores.max()
    assert above[-1][2] == 0.0 and above[-1][1] is None
    recalls = [r for _, _, r in curve]
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))


def test_pr_curve_through_an_attack():
    m, n = _split(range(5)), _split(range(5, 10), "eval-nonmember")
    curve = pr_curve(_fixed_attack(np.linspace(0.9, 0.1, 10)), None, m, n, grid_size=5)
    assert [round(c, 2) for c, _, _ in curve][0] == pytest.approx(0.1)
    assert curve[0][2] == 1.0 and curve[-1][2] == 0.0


def test_evaluate_uses_the_target_encoder(tiny_dataset, tiny_splits):
    # every pairwise cosine of a constant encoder is 1, so theta 0.5 calls all members
    rep = evaluate(ThresholdClassifier(0.5, 3, "cosine"), constant_encoder(), tiny_dataset,
                   tiny_splits["eval-member"], tiny_splits["eval-nonmember"],
                   D.moco_v1_pipeline(), n=3, with_curve=True)
    assert (rep.tp, rep.fp, rep.tn, rep.fn) == (20, 20, 0, 0)
    assert rep.pr_curve is not None


@pytest.fixture(scope="module")
def short_run(tiny_dataset, tiny_splits):
    cfg = ContrastiveConfig(algo="moco", arch="small-resnet", dim=16, width=4, epochs=2,
                            batch_size=16, queue_size=32, checkpoint_every=1)
    cks, _ = pretrain_encoder(tiny_dataset, tiny_splits["pretrain-member"], cfg, 0,
                              include_initial=True)
    return cks


def test_overfitting_monitor_rows(short_run, tiny_dataset, tiny_splits):
    members = tiny_splits["pretrain-member"].indices[:20]
    non = tiny_splits["eval-nonmember"].indices[:20]
    rows = overfitting_monitor(short_run, tiny_dataset, members, non, D.moco_v1_pipeline(), n=5)
    assert [r[0] for r in rows] == [0, 1, 2]
    assert all(-1 <= v <= 1 for r in rows for v in r[1:])
    # an untrained encoder cannot tell the two samples apart
    assert abs(rows[0][1] - rows[0][2]) < 0.05
    with pytest.raises(ValueError):
        overfitting_monitor(short_run[:1], tiny_dataset, members, non, D.moco_v1_pipeline())


def test_overfitting_monitor_single_image(short_run, tiny_dataset):
    rows = overfitting_monitor(short_run[:2], tiny_dataset, [3], [4], D.moco_v1_pipeline(), n=4,
                               seed=9)
    from encodermi.encoder import from_checkpoint
    for ck, (_, m, nm) in zip(short_run[:2], rows):
        enc = from_checkpoint(ck, 32)
        own = extract_many(tiny_dataset, [3], enc, D.moco_v1_pipeline(), 4, "cosine", 9)
        assert m == pytest.approx(own.mean())
        other = extract_many(tiny_dataset, [4], enc, D.moco_v1_pipeline(), 4, "cosine", 9)
        assert nm == pytest.approx(other.mean())


def test_early_stopping_study():
    assert early_stopping_study([], lambda e: (0, 0)) == []
    rows = early_stopping_study([50, 100], lambda e: (e / 200, e / 100))
    assert rows == [(50, 0.25, 0.5), (100, 0.5, 1.0)]

    def missing(e):
        raise MissingCheckpointError(f"no checkpoint for epoch {e}")

    with pytest.raises(MissingCheckpointError):
        early_stopping_study([50], missing)


def test_knowledge_settings_map_to_unique_shadows():
    settings_ = BackgroundKnowledge.all()
    assert len(settings_) == 8 and len(set(settings_)) == 8
    assert settings_[0].tag == "nnn" and settings_[-1].tag == "yyy"
    configs = [bk.shadow_config("cifar10", "small-resnet", "moco") for bk in settings_]
    assert len({tuple(sorted(c.items(), key=str)) for c in configs}) == 8
    nnn = configs[0]
    assert nnn == {"dataset": "stl10", "arch": "small-vgg", "algo": "simclr",
                   "query_pipeline": "crop-only"}
    assert configs[-1] == {"dataset": "cifar10", "arch": "small-resnet", "algo": "moco",
                           "query_pipeline": None}
    assert BackgroundKnowledge.parse("yes,no,yes") == BackgroundKnowledge(True, False, True)
    assert BackgroundKnowledge.parse("1,1,0").tag == "yyn"
    with pytest.raises(ValueError):
        BackgroundKnowledge.parse("yy")


def test_study_grid_counts_and_trial_seeds():
    seen = []

    def run_cell(bk, method, trial, seed):
        seen.append((bk.tag, method, trial, seed))
        return EvaluationReport(method, tp=trial, fp=0, tn=1, fn=0)

    cells = study_grid(BackgroundKnowledge.all(), ["vector", "set", "threshold"], 1, run_cell,
                       root_seed=10)
    assert len(cells) == 24
    assert {s for *_, s in seen} == {10}
    summary = cells[0].summary()
    assert summary["trials"] == 1 and summary["accuracy_std"] == 0.0
    seen.clear()
    cells = study_grid(BackgroundKnowledge.all()[:1], ["vector"], 3, run_cell, root_seed=10)
    assert [s for *_, s in seen] == [10, 11, 12]
    assert [r.trial for r in cells[0].reports] == [0, 1, 2]


def test_study_grid_names_the_missing_cell():
    def run_cell(bk, method, trial, seed):
        if bk.tag == "yny":
            raise FileNotFoundError("shadow checkpoint")
        return EvaluationReport(method, 1, 0, 1, 0)

    with pytest.raises(MissingAssetError, match="yny/set"):
        study_grid(BackgroundKnowledge.all(), ["set"], 1, run_cell)
