"""Teacher maps versus an untrained student's attention.

Teacher maps are Gaussian blobs over the queried cell; an untrained
student spreads its attention almost uniformly. The gap in entropy is
what makes the teacher worth distilling from.
"""

import numpy as np

from lavender.analysis import MAX_ENTROPY, entropy_histogram, map_entropy, student_maps
from lavender.experiment import init_model
from lavender.teacher import make_split, task_vocab
from lavender.trainer import TrainConfig

vocab = task_vocab()
train_set, test_set = make_split(120, 40, seed=0)
sample, teacher = train_set[0]
print("question + answer:", " ".join(sample.text))

word = sample.label_words[0]
grid = teacher[word].grid
print(f"teacher map for {word!r}: peak at {tuple(int(v) for v in np.unravel_index(grid.argmax(), grid.shape))}, "
      f"entropy {map_entropy(grid):.2f} of at most {MAX_ENTROPY:.2f} nats")

model = init_model(len(vocab), seed=0)
maps = student_maps(model, train_set, TrainConfig(agg_mode="mean-mean"))
raw = entropy_histogram([m[2] for m in maps], n_bins=10, group="student")
tea = entropy_histogram([m[4] for m in maps], n_bins=10, group="teacher")
print(f"mean entropy  student {raw.mean:.3f}  teacher {tea.mean:.3f}  gap {raw.mean - tea.mean:.2f} nats")
for lo, hi, n_s, n_t in zip(raw.edges[:-1], raw.edges[1:], raw.counts, tea.counts):
    print(f"  [{lo:4.2f}, {hi:4.2f})  student {'#' * (n_s // 4):30s} teacher {'#' * (n_t // 4)}")
