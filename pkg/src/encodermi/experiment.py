"""Manifest-driven experiment runs.

A run lives in ``<output_dir>/<name>/``::

    manifest.json   the manifest, overrides applied
    splits/         split manifests, one per dataset
    checkpoints/    encoder checkpoint series, one directory per encoder
    features/       cached membership score matrices
    classifiers/    trained inference classifiers
    reports/        per-stage JSON reports, the collated CSV and JSON summary
    plots/          PNG figures
    markers/        one JSON completion marker per finished stage

A marker lists every file its stage produced, so each artifact is reachable
from the manifest through exactly the stages that made it (see
:func:`orphans`). A stage with a marker is skipped; a stage without one is
redone, or continued from its partial outputs when the run is resumed.
"""
from __future__ import annotations

import concurrent.futures
import copy
import dataclasses
import hashlib
import json
import logging
import shutil
import threading
from pathlib import Path

import numpy as np

from . import baselines as B
from . import data as D
from .classifiers import load_classifier, save_classifier, train_classifier
from .contrastive import ContrastiveConfig, EncoderCheckpoint, checkpoint_epochs
from .contrastive.training import pretrain_encoder
from .encoder import connect_remote, from_checkpoint
from .evaluation import (
    DEFAULT_SWAP,
    BackgroundKnowledge,
    EvaluationReport,
    MissingAssetError,
    MissingCheckpointError,
    early_stopping_study,
    encodermi_attack,
    evaluate_attack,
    overfitting_monitor,
    study_grid,
)
from .membership import FeatureCache, build_inference_training_set, canonical_metric
from .reporting import collate, inputs_digest
from .rng import child_seed

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
KINDS = ("vector", "set", "threshold")
BASELINES = ("A", "B", "C", "D", "E")
# the inferrer's augmentation list for the overlap study, in the order the
# target adopts them
INFERRER_OPS = ("random-grayscale", "random-resized-crop", "random-horizontal-flip",
                "color-jitter")
# which parts of each benchmark form the sampling pool
DEFAULT_PARTS = {"cifar10": ["train"], "stl10": ["train", "test"], "tiny-imagenet": ["train"]}


class ManifestError(ValueError):
    """Validation failure; the message names the offending field."""


class ManifestConflictError(ValueError):
    pass


class InterruptedStage(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# manifests

def default_manifest():
    return {
        "schema_version": SCHEMA_VERSION,
        "name": "desk",
        "output_dir": "runs",
        "root_seed": 0,
        "data": {
            "target": "cifar10",
            "root": None,
            "resolution": 32,
            "parts": {},
            "swap": {},
            "synthetic_size": 6000,
            "synthetic_seed": 0,
        },
        "splits": {
            "pretrain-member": 2000,
            "eval-member": 1000,
            "eval-nonmember": 1000,
            "shadow-member": 2000,
            "shadow-nonmember": 2000,
            "downstream-train": 2000,
            "downstream-test": 1000,
        },
        "knowledge": "yyy",
        "target": ContrastiveConfig().to_dict(),
        "shadow": {},
        "extraction": {"n": 10, "metric": "cosine"},
        "classifiers": {"kinds": list(KINDS), "epochs": 300, "lr": 1e-4, "batch_size": 128},
        "baselines": {
            "methods": list(BASELINES),
            "e": 10,
            "grid": "3x3",
            "downstream": {"epochs": 100, "lr": 1e-3, "batch_size": 256, "hidden": 512},
            "adv": {"epsilon": 8 / 255, "iterations": 20, "step_size": None},
        },
        "trials": 5,
        "study": {
            "knowledge": "all",
            "methods": list(KINDS),
            "n_values": [2, 4, 10, 16],
            "metrics": ["cosine", "pearson-correlation", "negative-euclidean"],
            "sizes": ["500x500", "1000x1000", "2000x2000"],
            "overlap": [0, 1, 2, 3, 4],
            "early_stopping_epochs": [50, 100, 150, 200],
            "monitor_size": 200,
            "pr_grid": 101,
        },
        "audit": {"resolution": 224, "chunk_size": 64, "retries": 3, "pool_seed": 0},
    }


def preset(name):
    """Named starting points: ``desk`` (CIFAR10 desk scale) and ``smoke`` (seconds)."""
    m = default_manifest()
    if name == "desk":
        return m
    if name == "smoke":
        m["name"] = "smoke"
        m["data"].update(target="synthetic-shapes", synthetic_size=400)
        m["splits"] = {"pretrain-member": 60, "eval-member": 30, "eval-nonmember": 30,
                       "shadow-member": 60, "shadow-nonmember": 60,
                       "downstream-train": 60, "downstream-test": 30}
        m["target"].update(epochs=2, width=8, batch_size=32, queue_size=64, checkpoint_every=1)
        m["extraction"]["n"] = 4
        m["classifiers"]["epochs"] = 5
        m["baselines"].update(e=3)
        m["baselines"]["downstream"]["epochs"] = 5
        m["baselines"]["adv"]["iterations"] = 2
        m["trials"] = 2
        m["study"].update(knowledge="yyy,nnn", n_values=[2, 3], sizes=["30x30"],
                          overlap=[0, 4], early_stopping_epochs=[1, 2], monitor_size=10,
                          pr_grid=11)
        m["audit"]["resolution"] = 32
        return m
    raise ManifestError(f"unknown preset {name!r}; expected 'desk' or 'smoke'")


def _check_shape(value, template, path):
    if isinstance(template, dict) and template:
        if not isinstance(value, dict):
            raise ManifestError(f"{path}: expected an object")
        for key, sub in value.items():
            if key not in template:
                raise ManifestError(f"{path}.{key}: unknown field".lstrip("."))
            _check_shape(sub, template[key], f"{path}.{key}")
        return
    if template is None or value is None:
        return
    if isinstance(template, bool):
        ok = isinstance(value, bool)
    elif isinstance(template, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(template, int) and not isinstance(template, bool):
            ok = float(value).is_integer()
    elif isinstance(template, str):
        ok = isinstance(value, str)
    elif isinstance(template, (list, dict)):
        ok = isinstance(value, type(template))
    else:
        ok = True
    if not ok:
        raise ManifestError(f"{path.lstrip('.')}: expected {type(template).__name__}, "
                            f"got {value!r}")


def validate(m):
    """Raise ManifestError naming the first offending field."""
    if m.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(f"schema_version: expected {SCHEMA_VERSION}, "
                            f"got {m.get('schema_version')!r}")
    template = default_manifest()
    template["target"]["tau"] = 0.0
    _check_shape(m, template, "")
    for key in template:
        if key not in m:
            raise ManifestError(f"{key}: missing field")
    try:
        BackgroundKnowledge.parse(m["knowledge"])
    except ValueError as exc:
        raise ManifestError(f"knowledge: {exc}") from None
    try:
        ContrastiveConfig(**m["target"])
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"target.{exc}") from None
    if m["extraction"]["n"] < 2:
        raise ManifestError("extraction.n: need at least two augmented views")
    try:
        canonical_metric(m["extraction"]["metric"])
    except ValueError as exc:
        raise ManifestError(f"extraction.metric: {exc}") from None
    for role, size in m["splits"].items():
        if role not in D.ROLES:
            raise ManifestError(f"splits.{role}: unknown split role")
        if size < 0:
            raise ManifestError(f"splits.{role}: size must be >= 0")
    for kind in m["classifiers"]["kinds"]:
        if kind not in KINDS:
            raise ManifestError(f"classifiers.kinds: unknown kind {kind!r}")
    for meth in m["baselines"]["methods"]:
        if meth not in BASELINES:
            raise ManifestError(f"baselines.methods: unknown baseline {meth!r}")
    if m["baselines"]["grid"] not in B.GRIDS:
        raise ManifestError(f"baselines.grid: expected one of {sorted(B.GRIDS)}")
    if m["trials"] < 1:
        raise ManifestError("trials: must be >= 1")
    return m


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(m, overrides):
    """Apply ``key.sub=value`` strings; values are parsed as JSON when possible."""
    m = copy.deepcopy(m)
    for item in overrides or ():
        if "=" not in item:
            raise ManifestError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = m
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ManifestError(f"{key}: unknown field")
            node = node[p]
        node[parts[-1]] = _parse_value(text)
    return m


def load_manifest(path, overrides=None):
    try:
        m = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None
    return validate(apply_overrides(m, overrides))


def manifest_digest(m):
    core = {k: v for k, v in m.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()[:16]


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default))
    tmp.replace(path)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# ---------------------------------------------------------------------------
# encoder assets

@dataclasses.dataclass(frozen=True)
class EncoderSpec:
    """What to pre-train: which dataset and split, with which config."""

    name: str
    dataset: str
    split_file: str
    role: str
    config_json: str

    @property
    def config(self) -> ContrastiveConfig:
        return ContrastiveConfig(**json.loads(self.config_json))


def _spec(name, dataset, split_file, role, cfg: dict):
    return EncoderSpec(name, dataset, split_file, role, json.dumps(cfg, sort_keys=True))


def orphans(run_dir):
    """Files in a run directory that no completion marker accounts for."""
    run_dir = Path(run_dir)
    owned = set()
    for marker in (run_dir / "markers").glob("*.json"):
        owned.update(json.loads(marker.read_text())["artifacts"])
    out = []
    for path in sorted(run_dir.rglob("*")):
        if not path.is_file():
            continue
        rel = path.relative_to(run_dir).as_posix()
        if rel == "manifest.json" or rel.startswith("markers/"):
            continue
        if rel not in owned:
            out.append(rel)
    return out


# ---------------------------------------------------------------------------
# runs

class Run:
    """One experiment directory and the operations that fill it."""

    def __init__(self, manifest, workers=1, resume=False, notify=None, run_dir=None):
        self.m = validate(manifest)
        self.dir = Path(run_dir) if run_dir else Path(self.m["output_dir"]) / self.m["name"]
        self.workers = max(1, int(workers))
        self.resume = resume
        self.notify = notify or (lambda msg: log.info("%s", msg))
        self.root_seed = int(self.m["root_seed"])
        self.knowledge = BackgroundKnowledge.parse(self.m["knowledge"])
        self._datasets = {}
        self._encoders = {}
        self._lock = threading.Lock()
        self._open()

    @classmethod
    def from_dir(cls, run_dir, **kw):
        m = validate(json.loads((Path(run_dir) / "manifest.json").read_text()))
        return cls(m, run_dir=run_dir, **kw)

    def _open(self):
        path = self.dir / "manifest.json"
        if path.exists():
            stored = json.loads(path.read_text())
            if manifest_digest(stored) != manifest_digest(self.m):
                raise ManifestConflictError(
                    f"{self.dir} already holds a run with a different manifest; "
                    f"choose another name or output_dir")
        else:
            _write_json(path, self.m)
        for sub in ("splits", "checkpoints", "features", "classifiers", "reports", "plots",
                    "markers"):
            (self.dir / sub).mkdir(parents=True, exist_ok=True)
        self.cache = FeatureCache(self.dir / "features")

    # -- bookkeeping ----------------------------------------------------------

    def marker_path(self, key):
        return self.dir / "markers" / f"{key}.json"

    def is_complete(self, key):
        return self.marker_path(key).exists()

    def _owned(self):
        owned = set()
        for marker in (self.dir / "markers").glob("*.json"):
            owned.update(json.loads(marker.read_text())["artifacts"])
        return owned

    def stage(self, key, body, fresh_dirs=()):
        """Run ``body`` unless ``key`` is complete, then write its marker.

        ``fresh_dirs`` are this stage's private output directories; they are
        cleared before a non-resumed attempt so stale partial output cannot
        leak into the result.
        """
        if self.is_complete(key):
            self.notify(f"{key}: already complete")
            return json.loads(self.marker_path(key).read_text()).get("result")
        if not self.resume:
            for d in fresh_dirs:
                if Path(d).exists():
                    shutil.rmtree(d)
        result = body()
        owned = self._owned()
        produced = [p for p in orphans(self.dir) if p not in owned]
        _write_json(self.marker_path(key), {
            "stage": key, "manifest_digest": manifest_digest(self.m),
            "artifacts": produced, "result": result,
        })
        self.notify(f"{key}: done")
        return result

    def pmap(self, fn, items):
        items = list(items)
        if self.workers == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with concurrent.futures.ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(fn, items))

    def trial_seed(self, trial):
        return self.root_seed + int(trial)

    def knowledge_settings(self, arg=None):
        """``None`` -> the manifest's setting; ``all``; ``study``; or tags."""
        if arg is None:
            return [self.knowledge]
        if arg == "study":
            arg = self.m["study"]["knowledge"]
        if arg == "all":
            return BackgroundKnowledge.all()
        return [BackgroundKnowledge.parse(t) for t in arg.split(",") if t.strip()]

    # -- data -------------------------------------------------------------------

    def swap_map(self):
        return {**DEFAULT_SWAP, **self.m["data"]["swap"]}

    def dataset(self, kind):
        with self._lock:
            if kind not in self._datasets:
                d = self.m["data"]
                parts = d["parts"].get(kind) or DEFAULT_PARTS.get(kind, ["train"])
                loaded = [D.load_dataset(kind, d["root"], part, d["resolution"],
                                         seed=d["synthetic_seed"], size=d["synthetic_size"])
                          for part in parts]
                ds = loaded[0] if len(loaded) == 1 else D.ConcatDataset(kind, loaded,
                                                                          d["resolution"])
                self._datasets[kind] = ds
            return self._datasets[kind]

    def split_sizes(self, kind):
        sizes = dict(self.m["splits"])
        if kind == self.m["data"]["target"]:
            return sizes
        keep = ["shadow-member", "shadow-nonmember"]
        if self.dataset(kind).has_labels:
            keep += ["downstream-train", "downstream-test"]
        return {r: sizes[r] for r in keep if r in sizes}

    def splits(self, kind):
        path = self.dir / "splits" / f"{kind}.json"
        if not path.exists():
            raise MissingAssetError(f"splits for dataset {kind!r} (run prepare-data)")
        splits, _ = D.load_split_manifest(path)
        return {s.role: s for s in splits}

    def shadow_dataset_kind(self, bk):
        target = self.m["data"]["target"]
        return target if bk.P else self.swap_map()[target]

    def prepare_data(self, knowledge=None):
        kinds = [self.m["data"]["target"]]
        for bk in self.knowledge_settings(knowledge):
            k = self.shadow_dataset_kind(bk)
            if k not in kinds:
                kinds.append(k)
        for kind in kinds:
            def body(kind=kind):
                ds = self.dataset(kind)
                splits = D.make_splits(ds, self.split_sizes(kind),
                                       child_seed(self.root_seed, "splits", kind))
                D.check_disjoint(splits)
                D.save_split_manifest(self.dir / "splits" / f"{kind}.json", splits,
                                      self.root_seed)
                return {s.role: len(s) for s in splits}
            self.stage(f"prepare-data-{kind}", body)

    # -- encoders ----------------------------------------------------------------

    def target_spec(self):
        t = self.m["data"]["target"]
        return _spec("target", t, t, "pretrain-member", self.m["target"])

    def shadow_config(self, bk):
        tc = self.m["target"]
        sc = bk.shadow_config(self.m["data"]["target"], tc["arch"], tc["algo"], self.swap_map())
        cfg = {**tc, "arch": sc["arch"], "algo": sc["algo"]}
        if not bk.T:
            # a different algorithm brings its own default augmentation and temperature
            cfg.update(augmentations=None, tau=None)
        cfg.update(self.m["shadow"])
        return sc, cfg

    def shadow_spec(self, bk):
        sc, cfg = self.shadow_config(bk)
        name = f"shadow-{sc['dataset']}-{cfg['arch']}-{cfg['algo']}"
        return _spec(name, sc["dataset"], sc["dataset"], "shadow-member", cfg)

    def query_pipeline(self, bk):
        """Augmentation the inferrer queries with: the target's own when the
        training algorithm is known, random resized crop only otherwise."""
        if bk.T:
            return ContrastiveConfig(**self.m["target"]).pipeline()
        return D.crop_only_pipeline()

    def pretrain(self, spec: EncoderSpec, stop_after=None, splits=None):
        out = self.dir / "checkpoints" / spec.name

        def body():
            ds = self.dataset(spec.dataset)
            split = (splits or self.splits(spec.split_file))[spec.role]
            cfg = spec.config
            cks, history = pretrain_encoder(ds, split, cfg,
                                            child_seed(self.root_seed, "pretrain", spec.name),
                                            out_dir=out, include_initial=True,
                                            stop_after=stop_after)
            if not cks or cks[-1].epoch != cfg.epochs:
                raise InterruptedStage(
                    f"pre-training of {spec.name} stopped at epoch {len(history)}; "
                    f"rerun with --resume to continue")
            return {"epochs": cfg.epochs, "final_loss": history[-1][1]}

        return self.stage(f"pretrain-{spec.name}", body, fresh_dirs=[out])

    def checkpoint(self, spec: EncoderSpec, epoch=None) -> EncoderCheckpoint:
        cfg = spec.config
        epoch = cfg.epochs if epoch is None else int(epoch)
        path = self.dir / "checkpoints" / spec.name / f"epoch_{epoch:04d}.pt"
        if not self.is_complete(f"pretrain-{spec.name}"):
            raise MissingAssetError(f"encoder {spec.name!r} has not been pre-trained "
                                    f"(run pretrain)")
        if not path.exists():
            marks = checkpoint_epochs(cfg.epochs, cfg.checkpoint_every)
            raise MissingCheckpointError(
                f"encoder {spec.name!r} has no checkpoint at epoch {epoch}; available: {marks}")
        return EncoderCheckpoint.load(path)

    def checkpoints(self, spec):
        cfg = spec.config
        return [self.checkpoint(spec, e)
                for e in [0] + checkpoint_epochs(cfg.epochs, cfg.checkpoint_every)]

    def encoder(self, spec, epoch=None):
        key = (spec.name, epoch)
        with self._lock:
            if key not in self._encoders:
                self._encoders[key] = from_checkpoint(self.checkpoint(spec, epoch),
                                                      self.m["data"]["resolution"])
            return self._encoders[key]

    # -- attacks -------------------------------------------------------------------

    def _extraction(self, n=None, metric=None):
        e = self.m["extraction"]
        return (n or e["n"]), canonical_metric(metric or e["metric"])

    def _clf_kwargs(self, kind):
        c = self.m["classifiers"]
        if kind == "threshold":
            return {}
        return {"epochs": c["epochs"], "lr": c["lr"], "batch_size": c["batch_size"]}

    def inference_records(self, bk, trial, n=None, metric=None, shadow_epoch=None,
                          shadow=None, pipeline=None, splits=None):
        n, metric = self._extraction(n, metric)
        spec = shadow or self.shadow_spec(bk)
        sp = splits or self.splits(spec.split_file)
        return build_inference_training_set(
            self.encoder(spec, shadow_epoch), self.dataset(spec.dataset),
            sp["shadow-member"], sp["shadow-nonmember"], pipeline or self.query_pipeline(bk),
            n, metric, self.trial_seed(trial), self.cache)

    def classifier_path(self, bk, trial, kind):
        return self.dir / "classifiers" / bk.tag / f"trial{trial}" / f"{kind}.pt"

    def train_attack(self, knowledge=None):
        for bk in self.knowledge_settings(knowledge):
            def body(bk=bk):
                def one(trial):
                    records = self.inference_records(bk, trial)
                    out = {}
                    for kind in self.m["classifiers"]["kinds"]:
                        clf = train_classifier(kind, records, self.trial_seed(trial),
                                               **self._clf_kwargs(kind))
                        path = self.classifier_path(bk, trial, kind)
                        path.parent.mkdir(parents=True, exist_ok=True)
                        save_classifier(clf, path)
                        out[kind] = str(path.relative_to(self.dir))
                    return out
                return self.pmap(one, range(self.m["trials"]))
            self.stage(f"train-attack-{bk.tag}", body,
                       fresh_dirs=[self.dir / "classifiers" / bk.tag])

    def load_attack_classifier(self, bk, trial, kind):
        path = self.classifier_path(bk, trial, kind)
        if not self.is_complete(f"train-attack-{bk.tag}") or not path.exists():
            raise MissingAssetError(
                f"classifier {kind!r} for knowledge {bk.tag} trial {trial} "
                f"({path.relative_to(self.dir)}); run train-attack")
        return load_classifier(path)

    def _row(self, rep: EvaluationReport, bk, trial, fields=None):
        d = rep.to_dict()
        d.update(P=bk.P, E=bk.E, T=bk.T, knowledge=bk.tag, trial=trial,
                 seed=self.trial_seed(trial), **(fields or {}))
        return d

    def _eval(self, attack, trial, with_curve=False, splits=None):
        target_kind = self.m["data"]["target"]
        sp = splits or self.splits(target_kind)
        return evaluate_attack(attack, self.dataset(target_kind), sp["eval-member"],
                               sp["eval-nonmember"], with_curve=with_curve,
                               grid_size=self.m["study"]["pr_grid"])

    def evaluate(self, knowledge=None):
        n, metric = self._extraction()
        for bk in self.knowledge_settings(knowledge):
            # resolve every classifier first so a missing one fails fast
            jobs = [(t, kind, self.load_attack_classifier(bk, t, kind))
                    for t in range(self.m["trials"]) for kind in self.m["classifiers"]["kinds"]]

            def body(bk=bk, jobs=jobs):
                target = self.encoder(self.target_spec())
                pipe = self.query_pipeline(bk)

                def one(job):
                    trial, kind, clf = job
                    attack = encodermi_attack(clf, target, pipe, n, metric,
                                              self.trial_seed(trial), self.cache)
                    return self._row(self._eval(attack, trial, with_curve=True), bk, trial)

                rows = self.pmap(one, jobs)
                _write_json(self.dir / "reports" / f"evaluate-{bk.tag}.json", {"rows": rows})
                return {r["method"] + f"/trial{r['trial']}": r["accuracy"] for r in rows}

            self.stage(f"evaluate-{bk.tag}", body)

    # -- baselines -----------------------------------------------------------------

    def downstream(self, spec, trial, epoch=None):
        """Downstream classifier on a frozen encoder; None without labels."""
        ds = self.dataset(spec.dataset)
        if not ds.has_labels:
            return None
        sp = self.splits(spec.split_file)
        if "downstream-train" not in sp or not len(sp["downstream-train"]):
            return None
        cfg = self.m["baselines"]["downstream"]
        k = int(ds.labels.max()) + 1
        clf, _ = B.train_downstream(self.encoder(spec, epoch), ds, sp["downstream-train"],
                                    sp.get("downstream-test"), k,
                                    child_seed(self.trial_seed(trial), "downstream", spec.name),
                                    epochs=cfg["epochs"], lr=cfg["lr"],
                                    batch_size=cfg["batch_size"], hidden=cfg["hidden"])
        return clf

    def baseline_attack(self, method, bk, trial, downs=None):
        b = self.m["baselines"]
        seed = self.trial_seed(trial)
        shadow, target = self.shadow_spec(bk), self.target_spec()
        sds = self.dataset(shadow.dataset)
        sp = self.splits(shadow.split_file)
        sm, snm = sp["shadow-member"], sp["shadow-nonmember"]
        kw = {k: v for k, v in self._clf_kwargs("vector").items()}
        if method in ("A", "B", "C"):
            sdown, tdown = downs if downs else (self.downstream(shadow, trial),
                                                self.downstream(target, trial))
            if sdown is None or tdown is None:
                return None
            if sdown.k != tdown.k:
                return None
            if method == "A":
                return B.baseline_a(sdown, tdown, sds, sm, snm, seed, clf_kwargs=kw)
            if method == "B":
                return B.baseline_b(sdown, tdown, sds, sm, snm, seed, e=b["e"],
                                    pipeline=self.query_pipeline(bk), clf_kwargs=kw)
            adv = B.AdvExampleConfig(epsilon=b["adv"]["epsilon"],
                                     iterations=b["adv"]["iterations"],
                                     step_size=b["adv"]["step_size"])
            return B.baseline_c(sdown, tdown, sds, sm, snm, seed, adv=adv, clf_kwargs=kw)
        if method == "D":
            return B.baseline_d(self.encoder(shadow), self.encoder(target), sds, sm, snm, seed,
                                clf_kwargs=kw)
        if method == "E":
            return B.baseline_e(self.encoder(shadow), self.encoder(target), sds, sm, snm,
                                grid=b["grid"])
        raise ValueError(f"unknown baseline {method!r}")

    def run_baselines(self, knowledge=None):
        for bk in self.knowledge_settings(knowledge):
            shadow, target = self.shadow_spec(bk), self.target_spec()
            self.checkpoint(shadow)
            self.checkpoint(target)

            def body(bk=bk, shadow=shadow, target=target):
                def one(trial):
                    rows = []
                    downs = None
                    if {"A", "B", "C"} & set(self.m["baselines"]["methods"]):
                        downs = (self.downstream(shadow, trial), self.downstream(target, trial))
                    for method in self.m["baselines"]["methods"]:
                        attack = self.baseline_attack(method, bk, trial, downs)
                        name = f"baseline-{method.lower()}"
                        if attack is None:
                            # labels missing on one side: not applicable
                            rows.append({"method": name, "P": bk.P, "E": bk.E, "T": bk.T,
                                         "knowledge": bk.tag, "trial": trial,
                                         "seed": self.trial_seed(trial), "accuracy": None,
                                         "precision": None, "recall": None,
                                         "extra": {"note": "not applicable: labels missing"}})
                            continue
                        rep = self._eval(attack, trial)
                        rep.method = name
                        rows.append(self._row(rep, bk, trial))
                    return rows
                rows = [r for chunk in self.pmap(one, range(self.m["trials"])) for r in chunk]
                _write_json(self.dir / "reports" / f"baselines-{bk.tag}.json", {"rows": rows})
                return {r["method"] + f"/trial{r['trial']}": r["accuracy"] for r in rows}

            self.stage(f"baselines-{bk.tag}", body)

    # -- studies ----------------------------------------------------------------------

    def _encodermi_rows(self, bk, methods, trials, n=None, metric=None, target=None,
                        shadow=None, pipeline=None, target_epoch=None, shadow_epoch=None,
                        target_splits=None, shadow_splits=None, fields=None):
        n, metric = self._extraction(n, metric)
        target = target or self.target_spec()
        pipe = pipeline or self.query_pipeline(bk)
        tenc = self.encoder(target, target_epoch)

        def one(trial):
            records = self.inference_records(bk, trial, n, metric, shadow_epoch, shadow, pipe,
                                             shadow_splits)
            out = []
            for kind in methods:
                clf = train_classifier(kind, records, self.trial_seed(trial),
                                       **self._clf_kwargs(kind))
                attack = encodermi_attack(clf, tenc, pipe, n, metric, self.trial_seed(trial),
                                          self.cache)
                rep = self._eval(attack, trial, splits=target_splits)
                out.append(self._row(rep, bk, trial, fields))
            return out

        return [r for chunk in self.pmap(one, range(trials)) for r in chunk]

    def study(self, axis, values=None, methods=None, trials=None):
        s = self.m["study"]
        methods = list(methods or s["methods"])
        trials = int(trials or self.m["trials"])
        values = self._axis_values(axis, values)
        key = f"study-{axis}-" + hashlib.sha256(
            json.dumps([values, methods, trials]).encode()).hexdigest()[:8]

        def body():
            rows = getattr(self, f"_study_{axis.replace('-', '_')}")(values, methods, trials)
            _write_json(self.dir / "reports" / f"{key}.json",
                        {"axis": axis, "values": values, "methods": methods, "rows": rows})
            return {"rows": len(rows)}

        return self.stage(key, body)

    AXES = ("knowledge", "n", "metric", "size", "overlap", "early-stopping", "overfitting")

    def _axis_values(self, axis, values):
        s = self.m["study"]
        if axis not in self.AXES:
            raise ManifestError(f"study axis {axis!r}; expected one of {self.AXES}")
        if values is None:
            values = {"knowledge": s["knowledge"], "n": s["n_values"], "metric": s["metrics"],
                      "size": s["sizes"], "overlap": s["overlap"],
                      "early-stopping": s["early_stopping_epochs"], "overfitting": []}[axis]
        if isinstance(values, str):
            values = [v.strip() for v in values.split(",") if v.strip()]
        if axis == "knowledge":
            tags = values if values not in (["all"], ["study"]) else values[0]
            if isinstance(tags, str):
                return [bk.tag for bk in self.knowledge_settings(tags)]
            return [BackgroundKnowledge.parse(v).tag for v in tags]
        if axis in ("n", "overlap", "early-stopping"):
            return [int(v) for v in values]
        if axis == "metric":
            return [canonical_metric(v) for v in values]
        return list(values)

    def _study_knowledge(self, values, methods, trials):
        grid = [BackgroundKnowledge.parse(v) for v in values]
        self.checkpoint(self.target_spec())

        def cell(bk, method, trial, seed):
            return self._one_trial(bk, method, trial)

        cells = study_grid(grid, methods, trials, cell, self.root_seed)
        return [self._row(rep, BackgroundKnowledge.parse(c.knowledge), rep.trial,
                          {"method": f"encodermi-{c.method}"})
                for c in cells for rep in c.reports]

    def _one_trial(self, bk, method, trial, shadow_epoch=None, target_epoch=None):
        """Train one EncoderMI classifier on shadow data and score it on the target."""
        n, metric = self._extraction()
        pipe = self.query_pipeline(bk)
        records = self.inference_records(bk, trial, shadow_epoch=shadow_epoch)
        clf = train_classifier(method, records, self.trial_seed(trial), **self._clf_kwargs(method))
        attack = encodermi_attack(clf, self.encoder(self.target_spec(), target_epoch), pipe, n,
                                  metric, self.trial_seed(trial), self.cache)
        return self._eval(attack, trial)

    def _study_n(self, values, methods, trials):
        return [r for n in values
                for r in self._encodermi_rows(self.knowledge, methods, trials, n=n,
                                              fields={"n": n})]

    def _study_metric(self, values, methods, trials):
        return [r for metric in values
                for r in self._encodermi_rows(self.knowledge, methods, trials, metric=metric,
                                              fields={"similarity": metric})]

    def _study_size(self, values, methods, trials):
        """Pre-training size x shadow size; both encoders are trained per cell."""
        kind = self.m["data"]["target"]
        ds = self.dataset(kind)
        ev = self.m["splits"]
        rows = []
        for value in values:
            p, s = (int(x) for x in str(value).lower().split("x"))
            sizes = {"pretrain-member": p, "eval-member": min(p, ev["eval-member"]),
                     "eval-nonmember": ev["eval-nonmember"], "shadow-member": s,
                     "shadow-nonmember": s}
            splits = {sp.role: sp for sp in
                      D.make_splits(ds, sizes, child_seed(self.root_seed, "size-study", value))}
            target = _spec(f"size-study/target-{value}", kind, kind, "pretrain-member",
                           self.m["target"])
            shadow = _spec(f"size-study/shadow-{value}", kind, kind, "shadow-member",
                           self.m["target"])
            for spec in (target, shadow):
                self._train_inline(spec, splits)
            rows += self._encodermi_rows(BackgroundKnowledge(True, True, True), methods, trials,
                                         target=target, shadow=shadow, target_splits=splits,
                                         shadow_splits=splits,
                                         fields={"pretrain_size": p, "shadow_size": s})
        return rows

    def _train_inline(self, spec, splits):
        """Pre-train a study-private encoder; resumable like any other."""
        out = self.dir / "checkpoints" / spec.name
        cfg = spec.config
        final = out / f"epoch_{cfg.epochs:04d}.pt"
        if not final.exists():
            pretrain_encoder(self.dataset(spec.dataset), splits[spec.role], cfg,
                             child_seed(self.root_seed, "pretrain", spec.name), out_dir=out,
                             include_initial=True)
        # study encoders are not stage assets of their own
        with self._lock:
            self._encoders[(spec.name, None)] = from_checkpoint(EncoderCheckpoint.load(final),
                                                                self.m["data"]["resolution"])

    def _study_overlap(self, values, methods, trials):
        """Target uses Gaussian blur plus the first k of the inferrer's operations."""
        kind = self.m["data"]["target"]
        sp = self.splits(kind)
        inferrer = list(INFERRER_OPS)
        shadow_cfg = {**self.m["target"], "augmentations": inferrer}
        shadow = _spec("overlap-study/shadow", kind, kind, "shadow-member", shadow_cfg)
        self._train_inline(shadow, sp)
        pipe = D.pipeline_from_kinds(inferrer)
        rows = []
        for k in values:
            cfg = {**self.m["target"], "augmentations": ["gaussian-blur"] + inferrer[:k]}
            target = _spec(f"overlap-study/target-{k}", kind, kind, "pretrain-member", cfg)
            self._train_inline(target, sp)
            down = self._downstream_accuracy(target, 0)
            rows += self._encodermi_rows(BackgroundKnowledge(True, True, True), methods, trials,
                                         target=target, shadow=shadow, pipeline=pipe,
                                         fields={"overlap": k, "downstream_accuracy": down})
        return rows

    def _downstream_accuracy(self, spec, trial, epoch=None):
        clf = self.downstream(spec, trial, epoch)
        return None if clf is None else clf.test_accuracy

    def _study_early_stopping(self, values, methods, trials):
        """Matched target and shadow checkpoints per epoch, EncoderMI-V."""
        bk = self.knowledge
        target = self.target_spec()
        rows = []
        for trial in range(trials):
            def run_epoch(epoch, trial=trial):
                rep = self._one_trial(bk, "vector", trial, shadow_epoch=epoch, target_epoch=epoch)
                return rep.accuracy, self._downstream_accuracy(target, trial, epoch)

            for epoch, inf_acc, down_acc in early_stopping_study(values, run_epoch):
                rows.append({"method": "encodermi-vector", "P": bk.P, "E": bk.E, "T": bk.T,
                             "knowledge": bk.tag, "trial": trial, "seed": self.trial_seed(trial),
                             "epoch": epoch, "accuracy": inf_acc,
                             "downstream_accuracy": down_acc})
        return rows

    def _study_overfitting(self, values, methods, trials):
        kind = self.m["data"]["target"]
        sp = self.splits(kind)
        size = self.m["study"]["monitor_size"]
        members = list(sp["eval-member"].indices[:size])
        nonmembers = list(sp["eval-nonmember"].indices[:size])
        target = self.target_spec()
        rows = overfitting_monitor(self.checkpoints(target), self.dataset(kind), members,
                                   nonmembers, self.query_pipeline(self.knowledge),
                                   self.m["extraction"]["n"], self.root_seed,
                                   resolution=self.m["data"]["resolution"])
        return [{"epoch": e, "member_similarity": a, "nonmember_similarity": b, "gap": a - b}
                for e, a, b in rows]

    # -- remote audit ------------------------------------------------------------------

    def audit_remote(self, url, members_dir, nonmember_pool_dir, token=None, knowledge=None,
                     trial=0):
        a = self.m["audit"]
        bk = self.knowledge_settings(knowledge)[0]
        clfs = {kind: self.load_attack_classifier(bk, trial, kind)
                for kind in self.m["classifiers"]["kinds"]}
        key = "audit-remote-" + hashlib.sha256(
            json.dumps([url, str(members_dir), str(nonmember_pool_dir), bk.tag, trial]).encode()
        ).hexdigest()[:8]

        def body():
            res = a["resolution"]
            enc = connect_remote(url, token, resolution=res, chunk_size=a["chunk_size"],
                                 retries=a["retries"])
            members = D.load_image_directory(members_dir, resolution=res, name="audit-members")
            pool_ds = D.load_image_directory(nonmember_pool_dir, name="audit-pool")
            pool = [pool_ds.image(i) for i in range(len(pool_ds))]
            concat = D.make_concat_nonmembers(pool, a["pool_seed"])
            nonmembers = D.ArrayDataset("audit-nonmembers",
                                        np.stack([D.resize(im, res, res) for im in concat]),
                                        resolution=res)
            n, metric = self._extraction()
            mem = D.DatasetSplit("audit-members", "eval-member", range(len(members)))
            non = D.DatasetSplit("audit-nonmembers", "eval-nonmember", range(len(nonmembers)))
            rows = []
            for kind, clf in clfs.items():
                attack = encodermi_attack(clf, enc, self.query_pipeline(bk), n, metric,
                                          self.trial_seed(trial))
                rep = evaluate_attack(attack, members, mem, non, nonmember_dataset=nonmembers)
                rows.append(self._row(rep, bk, trial, {"url": url}))
            _write_json(self.dir / "reports" / f"{key}.json", {"rows": rows})
            return {r["method"]: r["accuracy"] for r in rows}

        return self.stage(key, body)

    # -- report ----------------------------------------------------------------------

    def report(self):
        """Collate whatever stage reports exist; redone when they change."""
        key = f"report-{inputs_digest(self.dir / 'reports')}"
        if not self.is_complete(key):
            for old in (self.dir / "markers").glob("report-*.json"):
                old.unlink()
        return self.stage(key, lambda: {"cells": len(collate(self.dir / "reports",
                                                              self.dir / "plots")["cells"])})
