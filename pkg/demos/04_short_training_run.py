"""Alignment training on the colour-grid task.

Trains the toy model twice from the same initialization: once with the
attention-alignment loss and once with lambda = 0, then reports held-out
accuracy and the L_att curve. Takes under two minutes.
"""

import math

from lavender.analysis import calibration_series
from lavender.experiment import init_model
from lavender.teacher import make_split, task_vocab
from lavender.trainer import TrainConfig, Trainer
from lavender.vlm import accuracy

EPOCHS = 30
vocab = task_vocab()
train_set, test_set = make_split(500, 200, seed=0)

for lam in (0.5, 0.0):
    cfg = TrainConfig(lam=lam, epochs=EPOCHS, pretrain_epochs=math.ceil(EPOCHS / 3), seed=0)
    model = init_model(len(vocab), cfg.seed)
    trainer = Trainer(model, cfg, steps_per_epoch=math.ceil(len(train_set) / cfg.batch))
    result = trainer.train(train_set, test_set)
    acc = accuracy(model, [s for s, _ in test_set])
    print(f"lambda {lam}: held-out accuracy {acc:.3f}")
    for e in result.log.epochs[::5] + result.log.epochs[-1:]:
        l_att = "   -  " if e.l_att is None else f"{e.l_att:.4f}"
        print(f"  epoch {e.epoch:2d} {e.phase:8s} L_vlm {e.l_vlm:.3f}  L_att {l_att}  acc {e.eval_acc:.3f}")
    if lam > 0:
        print("  Pearson r(L_att, acc):", calibration_series(result.log).correlation)
