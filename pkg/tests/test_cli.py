import json

import pytest

from encodermi import cli
from encodermi import experiment as X
from encodermi.reporting import CSV_COLUMNS, read_csv

TINY = [
    "data.synthetic_size=200",
    'splits={"pretrain-member": 24, "eval-member": 12, "eval-nonmember": 12, '
    '"shadow-member": 24, "shadow-nonmember": 24, "downstream-train": 40, "downstream-test": 20}',
    "target.width=4",
    "target.epochs=2",
    "target.batch_size=12",
    "target.queue_size=24",
    "extraction.n=3",
    "classifiers.epochs=3",
    "trials=1",
    'study.knowledge="yyy"',
    "study.monitor_size=6",
]


def _manifest(tmp_path, name="tiny", extra=()):
    m = X.apply_overrides(X.preset("smoke"), TINY + list(extra))
    m["output_dir"] = str(tmp_path)
    m["name"] = name
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(m))
    return path


def _run(args, capsys=None):
    code = cli.main(args)
    out = capsys.readouterr() if capsys is not None else None
    return code, out


PIPELINE = ["prepare-data", "pretrain", "train-attack", "evaluate", "report"]


def _pipeline(manifest, capsys=None):
    for cmd in PIPELINE:
        code, _ = _run([cmd, "--manifest", str(manifest)], capsys)
        assert code == 0, cmd


def test_init_writes_a_valid_manifest(tmp_path, capsys):
    out = tmp_path / "m.json"
    assert cli.main(["init", "--preset", "smoke", "--set", "trials=3", "-o", str(out)]) == 0
    m = json.loads(out.read_text())
    assert m["trials"] == 3 and m["schema_version"] == X.SCHEMA_VERSION
    X.validate(m)


@pytest.mark.parametrize("override,field", [
    ("trials=0", "trials"),
    ('extraction.metric="manhattan"', "extraction.metric"),
    ("extraction.n=1", "extraction.n"),
    ('knowledge="maybe"', "knowledge"),
    ("target.epochs=-1", "target.epochs"),
    ('target.arch="vit"', "target.arch"),
    ("splits.eval-member=-5", "splits.eval-member"),
    ('bogus="x"', "bogus"),
])
def test_validation_errors_name_the_field(tmp_path, capsys, override, field):
    path = _manifest(tmp_path)
    code, out = _run(["prepare-data", "--manifest", str(path), "--set", override], capsys)
    assert code == 2
    assert field in out.err


def test_schema_version_checked(tmp_path):
    m = X.preset("smoke")
    m["schema_version"] = 99
    with pytest.raises(X.ManifestError, match="schema_version"):
        X.validate(m)


def test_evaluate_before_train_attack_names_the_classifier(tmp_path, capsys):
    path = _manifest(tmp_path)
    for cmd in ("prepare-data", "pretrain"):
        assert _run([cmd, "--manifest", str(path)])[0] == 0
    code, out = _run(["evaluate", "--manifest", str(path)], capsys)
    assert code == 2
    assert "classifier" in out.err and "train-attack" in out.err


def test_pipeline_rerun_and_orphans(tmp_path, capsys):
    path = _manifest(tmp_path)
    _pipeline(path, capsys)
    run_dir = tmp_path / "tiny"
    for sub in ("manifest.json", "splits", "checkpoints", "classifiers", "reports", "plots",
                "markers"):
        assert (run_dir / sub).exists(), sub
    rows = read_csv(run_dir / "reports" / "report.csv")
    assert list(rows[0]) == list(CSV_COLUMNS)
    assert {r["method"] for r in rows} == {"encodermi-vector", "encodermi-set",
                                           "encodermi-threshold"}
    assert all(r["P"] == r["E"] == r["T"] == "yes" for r in rows)
    assert X.orphans(run_dir) == []
    code, out = _run(["train-attack", "--manifest", str(path)], capsys)
    assert code == 0 and "already complete" in out.out
    # a stray file is reported by the orphan check
    (run_dir / "reports" / "stray.txt").write_text("x")
    assert X.orphans(run_dir) == ["reports/stray.txt"]


def test_changed_manifest_conflicts_with_existing_run(tmp_path, capsys):
    path = _manifest(tmp_path)
    assert _run(["prepare-data", "--manifest", str(path)])[0] == 0
    code, out = _run(["prepare-data", "--manifest", str(path), "--set", "root_seed=5"], capsys)
    assert code == 2 and "different manifest" in out.err


def test_study_n_axis_gives_one_row_per_value_and_method(tmp_path, capsys):
    path = _manifest(tmp_path)
    for cmd in ("prepare-data", "pretrain"):
        assert _run([cmd, "--manifest", str(path)])[0] == 0
    code, _ = _run(["study", "--manifest", str(path), "--axis", "n", "--values", "2,4,10,16"],
                   capsys)
    assert code == 0
    assert _run(["report", "--manifest", str(path)])[0] == 0
    reports = tmp_path / "tiny" / "reports"
    (csv_path,) = reports.glob("study-n-*.csv")
    rows = read_csv(csv_path)
    pairs = sorted((int(r["n"]), r["method"]) for r in rows)
    assert pairs == sorted((n, f"encodermi-{m}") for n in (2, 4, 10, 16) for m in X.KINDS)
    summary = json.loads((reports / "summary.json").read_text())
    assert any(s["axis"] == "n" for s in summary["studies"].values())
    assert list((tmp_path / "tiny" / "plots").glob("study-n-*.png"))


def test_interrupted_pretrain_resumes_to_identical_results(tmp_path, capsys):
    a = _manifest(tmp_path, "a")
    b = _manifest(tmp_path, "b")
    _pipeline(a)
    assert _run(["prepare-data", "--manifest", str(b)])[0] == 0
    code, out = _run(["pretrain", "--manifest", str(b), "--stop-after-epochs", "1"], capsys)
    assert code == 3 and "--resume" in out.err
    assert not list((tmp_path / "b" / "markers").glob("pretrain-*"))
    assert _run(["pretrain", "--manifest", str(b), "--resume"])[0] == 0
    for cmd in PIPELINE[2:]:
        assert _run([cmd, "--manifest", str(b)])[0] == 0
    # a run is fully determined by its manifest; names differ only in the output path
    ra = (tmp_path / "a" / "reports" / "report.csv").read_text()
    rb = (tmp_path / "b" / "reports" / "report.csv").read_text()
    assert ra == rb
    ea = json.loads((tmp_path / "a" / "reports" / "evaluate-yyy.json").read_text())
    eb = json.loads((tmp_path / "b" / "reports" / "evaluate-yyy.json").read_text())
    assert ea == eb


def test_baselines_via_cli(tmp_path, capsys):
    path = _manifest(tmp_path, extra=['baselines.methods=["B", "D", "E"]', "baselines.e=2"])
    for cmd in ("prepare-data", "pretrain", "baselines", "report"):
        assert _run([cmd, "--manifest", str(path)], capsys)[0] == 0
    rows = read_csv(tmp_path / "tiny" / "reports" / "report.csv")
    assert {r["method"] for r in rows} == {"baseline-b", "baseline-d", "baseline-e"}
    assert all(r["accuracy"] for r in rows)


def test_audit_remote_against_a_served_checkpoint(tmp_path, capsys):
    import numpy as np
    from PIL import Image

    from encodermi.encoder import EncoderServer, load_local

    path = _manifest(tmp_path)
    for cmd in ("prepare-data", "pretrain", "train-attack"):
        assert _run([cmd, "--manifest", str(path)])[0] == 0
    run = X.Run.from_dir(tmp_path / "tiny")
    spec = run.target_spec()
    ds = run.dataset(spec.dataset)
    splits = run.splits(spec.split_file)
    for sub, ids in (("members", splits["pretrain-member"].indices[:6]),
                     ("pool", splits["eval-nonmember"].indices[:12])):
        (tmp_path / sub).mkdir()
        for i in ids:
            img = np.round(ds.image(i) * 255).astype(np.uint8)
            Image.fromarray(img).save(tmp_path / sub / f"{i}.png")
    ckpt = tmp_path / "tiny" / "checkpoints" / spec.name / "epoch_0002.pt"
    with EncoderServer(load_local(ckpt), token="t0k") as srv:
        code, out = _run(["audit-remote", "--manifest", str(path), "--url", srv.url,
                          "--token", "t0k", "--members", str(tmp_path / "members"),
                          "--nonmember-pool", str(tmp_path / "pool")], capsys)
        assert code == 0, out.err
        assert srv.requests_served > 0
    assert _run(["report", "--manifest", str(path)])[0] == 0
    summary = json.loads((tmp_path / "tiny" / "reports" / "summary.json").read_text())
    (rows,) = summary["audits"].values()
    assert {r["method"] for r in rows} == {f"encodermi-{k}" for k in X.KINDS}
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in rows)
    assert X.orphans(tmp_path / "tiny") == []
