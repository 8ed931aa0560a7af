"""Small shared fixtures: a linearly separable two-class toy set."""

import numpy as np

from lanerisk.architectures import Model
from lanerisk.datapipe import Sample
from lanerisk.layers import Dense

TOY_DIM = 32


def separable_samples(n=40, d=TOY_DIM, seed=0, mean=1.0, spread=0.5):
    """Two Gaussian clusters centred on ``-mean * 1`` and ``+mean * 1``.

    The signal is spread over every feature, so a decayed Adam step budget
    can turn any initial hyperplane around. Classes alternate by index.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        cls = i % 2
        x = rng.normal((2 * cls - 1) * mean, spread, size=d)
        out.append(Sample(x, np.array([1.0 - cls, float(cls)]), f"toy{i:03d}"))
    return out


def dense_softmax(d=TOY_DIM, seed=0):
    return Model([Dense(d, 2, "softmax", rng=np.random.default_rng(seed))])
