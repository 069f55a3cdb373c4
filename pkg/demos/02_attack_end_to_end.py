"""EncoderMI end to end through the library API.

1. The model owner pre-trains a target encoder on its member images.
2. The inferrer, knowing the distribution, architecture and algorithm,
   pre-trains a shadow encoder on disjoint data it controls.
3. Shadow members/non-members become labeled membership features.
4. Three inference classifiers are trained on them and pointed at the target.

    python demos/02_attack_end_to_end.py          (a few minutes on one CPU)
"""
import torch

from encodermi import data as D
from encodermi.classifiers import train_classifier
from encodermi.contrastive import ContrastiveConfig, pretrain_encoder
from encodermi.encoder import from_checkpoint
from encodermi.evaluation import encodermi_attack, evaluate_attack
from encodermi.membership import build_inference_training_set

torch.set_num_threads(1)

dataset = D.make_synthetic_dataset(1200, seed=0)
sizes = {"pretrain-member": 200, "eval-member": 100, "eval-nonmember": 100,
         "shadow-member": 200, "shadow-nonmember": 200}
splits = {s.role: s for s in D.make_splits(dataset, sizes, seed=0)}
cfg = ContrastiveConfig(algo="moco", arch="small-resnet", dim=64, width=8, epochs=40,
                        batch_size=50, queue_size=200, checkpoint_every=40)

print("pre-training target and shadow encoders ...")
(target_ck,), _ = pretrain_encoder(dataset, splits["pretrain-member"], cfg, seed=1)
(shadow_ck,), _ = pretrain_encoder(dataset, splits["shadow-member"], cfg, seed=2)
target, shadow = from_checkpoint(target_ck), from_checkpoint(shadow_ck)

n, metric, pipeline = 10, "cosine", cfg.pipeline()
records = build_inference_training_set(shadow, dataset, splits["shadow-member"],
                                       splits["shadow-nonmember"], pipeline, n, metric, seed=3)
print(f"{len(records)} labeled records of {len(records[0].features.scores)} scores each")

for kind in ("vector", "set", "threshold"):
    clf = train_classifier(kind, records, seed=0,
                           **({} if kind == "threshold" else {"epochs": 100}))
    attack = encodermi_attack(clf, target, pipeline, n, metric, seed=4)
    rep = evaluate_attack(attack, dataset, splits["eval-member"], splits["eval-nonmember"],
                          with_curve=True, grid_size=11)
    prec = "n/a" if rep.precision is None else f"{rep.precision:.3f}"
    print(f"EncoderMI-{kind[0].upper()}: accuracy {rep.accuracy:.3f}  precision {prec}  "
          f"recall {rep.recall:.3f}")

# The threshold classifier needs no training beyond choosing theta on shadow
# averages, which makes it a useful sanity check for the other two.
