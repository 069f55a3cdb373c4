import numpy as np
import pytest
import torch

from encodermi import data as D
from encodermi.baselines import (
    AdvExampleConfig,
    DownstreamClassifier,
    LabelOutOfRangeError,
    adversarial_features,
    adversarial_views,
    baseline_a,
    baseline_b,
    baseline_c,
    baseline_d,
    baseline_e,
    confidence_features,
    correctness_bits,
    image_patches,
    patch_similarity,
    pgd_targeted,
    train_downstream,
)
from encodermi.classifiers import SingleClassError, ThresholdClassifier
from encodermi.contrastive import build_encoder
from encodermi.encoder import DimensionMismatchError, LocalEncoder
from encodermi.rng import torch_seeded

from .conftest import StubEncoder, constant_encoder, mean_color_encoder
from .oracles import cosine

FAST = {"epochs": 3}


def _local(seed=0, dim=8):
    with torch_seeded(seed):
        return LocalEncoder(build_encoder("small-vgg", dim, 4), dim, resolution=32,
                            name=f"vgg{seed}")


@pytest.fixture(scope="module")
def downs(tiny_dataset, tiny_splits):
    enc_s, enc_t = _local(0), _local(1)
    sd, _ = train_downstream(enc_s, tiny_dataset, tiny_splits["downstream-train"],
                             tiny_splits["downstream-test"], 10, seed=0, epochs=5)
    td, _ = train_downstream(enc_t, tiny_dataset, tiny_splits["downstream-train"],
                             tiny_splits["downstream-test"], 10, seed=1, epochs=5)
    return sd, td


def test_downstream_head_leaves_encoder_frozen(tiny_dataset, tiny_splits):
    enc = _local(3)
    before = {k: v.clone() for k, v in enc.model.state_dict().items()}
    clf, acc = train_downstream(enc, tiny_dataset, tiny_splits["downstream-train"],
                                tiny_splits["downstream-test"], 10, seed=0, epochs=2)
    assert 0.0 <= acc <= 1.0 and clf.k == 10
    for k, v in enc.model.state_dict().items():
        torch.testing.assert_close(v, before[k], rtol=0, atol=0)


def test_downstream_label_errors(tiny_dataset, tiny_splits):
    enc = mean_color_encoder(4)
    with pytest.raises(LabelOutOfRangeError):
        train_downstream(enc, tiny_dataset, tiny_splits["downstream-train"], None, 2, seed=0)
    one = D.ArrayDataset("one", np.zeros((6, 8, 8, 3), np.float32), labels=[0] * 6)
    with pytest.raises(SingleClassError):
        train_downstream(enc, one, D.DatasetSplit("one", "downstream-train", tuple(range(6))),
                         None, 2, seed=0)


def test_feature_shapes(downs, tiny_dataset, tiny_splits):
    sd, td = downs
    ids = list(tiny_splits["eval-member"].indices[:3])
    a = confidence_features(td, tiny_dataset, ids)
    assert a.shape == (3, 10)
    assert np.all(np.diff(a, axis=1) <= 0)  # sorted descending
    np.testing.assert_allclose(a.sum(1), 1.0, atol=1e-5)
    b = correctness_bits(td, tiny_dataset, ids, 10, D.moco_v1_pipeline(), seed=0)
    assert b.shape == (3, 11) and set(np.unique(b)) <= {0.0, 1.0}
    c = adversarial_features(sd, td, tiny_dataset, ids[:2], AdvExampleConfig(iterations=2), 0)
    assert c.shape == (2, 100)
    assert baseline_d(_local(0), _local(1), tiny_dataset, tiny_splits["shadow-member"],
                      tiny_splits["shadow-nonmember"], 0, FAST).featurize(
        tiny_dataset, ids).shape == (3, 8)
    e = baseline_e(_local(0), _local(1), tiny_dataset, tiny_splits["shadow-member"],
                   tiny_splits["shadow-nonmember"])
    assert e.featurize(tiny_dataset, ids).shape == (3,)
    assert isinstance(e.classifier, ThresholdClassifier)


def test_pgd_stays_in_ball_and_range():
    torch.manual_seed(0)
    lin = torch.nn.Linear(3 * 8 * 8, 4)
    fn = lambda x: lin(x.flatten(1))  # noqa: E731
    # extreme pixels so clipping to [0, 1] matters
    x = torch.cat([torch.zeros(2, 3, 8, 8), torch.ones(2, 3, 8, 8), torch.rand(4, 3, 8, 8)])
    target = torch.arange(8) % 4
    cfg = AdvExampleConfig(epsilon=8 / 255, iterations=20)
    adv = pgd_targeted(fn, x, target, cfg, torch.Generator().manual_seed(0))
    assert (adv - x).abs().max() <= cfg.epsilon + 1e-7
    assert adv.min() >= 0 and adv.max() <= 1
    assert cfg.step == pytest.approx(cfg.epsilon / 10)
    # the attack moves towards its target
    ce = torch.nn.functional.cross_entropy
    assert ce(fn(adv), target) < ce(fn(x), target)


def test_zero_budget_gives_k_copies_of_clean_confidences(downs, tiny_dataset):
    sd, td = downs
    ids = [0, 1]
    cfg = AdvExampleConfig(epsilon=0.0, iterations=3)
    views = adversarial_views(sd, tiny_dataset.images(ids), cfg, seed=0)
    np.testing.assert_array_equal(views, np.repeat(tiny_dataset.images(ids)[:, None], 10, axis=1))
    feats = adversarial_features(sd, td, tiny_dataset, ids, cfg, seed=0)
    clean = td.confidences(tiny_dataset.images(ids))
    np.testing.assert_allclose(feats, np.tile(clean, (1, 10)), atol=1e-6)


class _Perfect:
    """Downstream classifier that always predicts the dataset's single label."""

    k = 2

    def predict(self, batch):
        return np.ones(len(batch), dtype=np.int64)


def test_perfect_classifier_gives_all_ones_and_chance_accuracy(rng):
    ds = D.ArrayDataset("ones", rng.random((20, 8, 8, 3), dtype=np.float32), labels=[1] * 20)
    bits = correctness_bits(_Perfect(), ds, range(20), 10, D.moco_v1_pipeline(), seed=0)
    np.testing.assert_array_equal(bits, 1.0)
    mem = D.DatasetSplit("ones", "shadow-member", tuple(range(10)))
    non = D.DatasetSplit("ones", "shadow-nonmember", tuple(range(10, 20)))
    att = baseline_b(_Perfect(), _Perfect(), ds, mem, non, seed=0, e=10, clf_kwargs=FAST)
    pred = att.predict(ds, range(20))
    # constant features give a constant decision, right on exactly one half
    assert len(set(pred.tolist())) == 1
    assert (pred == np.r_[np.ones(10), np.zeros(10)]).mean() == 0.5


def test_baseline_b_needs_labels(rng):
    ds = D.ArrayDataset("unlabeled", rng.random((4, 8, 8, 3), dtype=np.float32))
    with pytest.raises(D.MissingLabelsError):
        correctness_bits(_Perfect(), ds, range(4), 10, D.moco_v1_pipeline(), 0)


def test_baseline_a_and_c_train_end_to_end(downs, tiny_dataset, tiny_splits):
    sd, td = downs
    m, nm = tiny_splits["shadow-member"], tiny_splits["shadow-nonmember"]
    att = baseline_a(sd, td, tiny_dataset, m, nm, seed=0, clf_kwargs=FAST)
    assert att.predict(tiny_dataset, [0, 1, 2]).shape == (3,)
    small_m = D.DatasetSplit(m.name, m.role, m.indices[:4])
    small_n = D.DatasetSplit(nm.name, nm.role, nm.indices[:4])
    att = baseline_c(sd, td, tiny_dataset, small_m, small_n, seed=0,
                     adv=AdvExampleConfig(iterations=2), clf_kwargs=FAST)
    assert att.member_scores(tiny_dataset, [0]).shape == (1,)


def test_baseline_d_dimension_mismatch(tiny_dataset, tiny_splits):
    with pytest.raises(DimensionMismatchError):
        baseline_d(mean_color_encoder(4), mean_color_encoder(5), tiny_dataset,
                   tiny_splits["shadow-member"], tiny_splits["shadow-nonmember"], 0)


def test_baseline_d_constant_encoder_is_chance(tiny_dataset, tiny_splits):
    enc = constant_encoder((1.0, 2.0, 3.0))
    att = baseline_d(enc, enc, tiny_dataset, tiny_splits["shadow-member"],
                     tiny_splits["shadow-nonmember"], 0, FAST)
    ids = list(tiny_splits["eval-member"].indices) + list(tiny_splits["eval-nonmember"].indices)
    pred = att.predict(tiny_dataset, ids)
    truth = np.r_[np.ones(20), np.zeros(20)]
    assert (pred == truth).mean() == 0.5


def test_patch_grid_geometry(rng):
    img = rng.random((10, 11, 3), dtype=np.float32)
    p = image_patches(img, "3x3", 6)
    assert p.shape == (9, 6, 6, 3)
    # floor division: 3x3 patches of the top-left 9x9 region
    np.testing.assert_allclose(image_patches(img, "3x3", 3), image_patches(img[:9, :9], "3x3", 3),
                               atol=1e-6)
    assert image_patches(img, "3x1", 4).shape == (3, 4, 4, 3)
    assert image_patches(img, "3x5", 4).shape == (15, 4, 4, 3)
    with pytest.raises(ValueError):
        image_patches(img[:2, :2], "3x3", 4)


@pytest.mark.parametrize("grid,center", [("3x3", 4), ("3x1", 1), ("3x5", 7)])
def test_patch_similarity_against_loop(grid, center, rng):
    img = rng.random((30, 30, 3), dtype=np.float32)
    enc = mean_color_encoder(4)
    feats = enc.embed_batch(image_patches(img, grid, 30))
    others = [j for j in range(len(feats)) if j != center]
    want = sum(cosine(feats[center], feats[j]) for j in others) / len(others)
    assert patch_similarity(enc, img, grid) == pytest.approx(want, rel=1e-9)
    if grid == "3x3":
        assert len(others) == 8


def test_constant_image_patch_similarity_is_one():
    img = np.full((32, 32, 3), 0.3, np.float32)
    assert patch_similarity(_local(0), img, "3x3") == pytest.approx(1.0, abs=1e-5)
    sums = StubEncoder(lambda b: b.sum(axis=(1, 2)), 3)
    assert patch_similarity(sums, img, "3x5") == pytest.approx(1.0, abs=1e-9)


def test_downstream_classifier_needs_local_encoder_for_gradients():
    down = DownstreamClassifier(mean_color_encoder(4), torch.nn.Linear(4, 2), 2,
                                torch.zeros(4), torch.ones(4))
    with pytest.raises(TypeError):
        down.torch_logits(torch.zeros(1, 3, 8, 8))
