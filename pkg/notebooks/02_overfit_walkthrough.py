"""
Memorising a tiny training set
==============================

Train the desk-scale model on 16 synthetic samples and watch the
combined loss, Dice and accuracy move. A full 200-epoch run takes a
few minutes on one CPU; EPOCHS below keeps the walk-through short.
"""

import numpy as np

from resformer_mtl.config import ModelConfig, TrainConfig
from resformer_mtl.data import synth_generate
from resformer_mtl.metrics import format_report
from resformer_mtl.training import evaluate, predict_samples, train

EPOCHS = 60

samples = synth_generate(np.random.default_rng(0), 16, 32, 2)

# channels [8, 16, 32, 64], window 4, 32x32 inputs
cfg = TrainConfig(model=ModelConfig.tiny(variant="parallel"), epochs=EPOCHS, augment=False)


def show(record):
    if record["epoch"] % 10 == 0 or record["epoch"] == 1:
        print("epoch {epoch:3d}  train {train_loss:.4f}  dsc {mean_dsc:.3f}".format(**record))


result = train(cfg, samples, write_files=False, on_epoch=show)

# metrics on the training set itself (the model is meant to memorise it)
print(format_report(evaluate(result.model, samples)))

# compare one predicted mask with its ground truth
preds = predict_samples(result.model, samples[:1])
truth, guess = samples[0].mask, preds.masks[0]
for a, b in zip(truth[::2], guess[::2]):
    print("".join(".ab"[v] for v in a[::2]), "  ", "".join(".ab"[v] for v in b[::2]))
