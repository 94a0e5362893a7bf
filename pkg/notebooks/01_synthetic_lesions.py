"""
Synthetic lesion images
=======================

A look at the generator used by the smoke tests: images, masks, labels,
and what augmentation does to them.
"""

import numpy as np

from resformer_mtl.data import augment, check_consistency, synth_generate

rng = np.random.default_rng(0)
samples = synth_generate(rng, 8, 32, 2)

# each sample holds an RGB image in [0, 1], a class-index mask and a label row
s = samples[0]
print(s.image.shape, s.mask.shape, s.labels)

# labels are derived from the mask: class k is present iff some pixel has value k
for s in samples:
    present = sorted(set(np.unique(s.mask)) - {0})
    print(s.name, "mask classes", present, "labels", s.labels.tolist())

# a crude text rendering of one mask
for row in samples[1].mask[::2]:
    print("".join(".ab"[v] for v in row[::2]))

# augmentation moves image and mask together and keeps labels consistent
aug = augment(samples[1], np.random.default_rng(5))
print("consistent after augment:", check_consistency(aug) == [])
for row in aug.mask[::2]:
    print("".join(".ab"[v] for v in row[::2]))

# class presence is roughly balanced over a larger draw
many = synth_generate(np.random.default_rng(1), 200, 16, 2)
print("presence rate per class:", np.mean([m.labels for m in many], axis=0))
