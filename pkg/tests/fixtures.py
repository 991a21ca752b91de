"""Small hand-built objects shared by several test modules."""

from __future__ import annotations

import numpy as np

from stagnn.model import ModelConfig, init_params
from stagnn.pipeline import Channel, FeatureSchema


def tiny_schema(n_entities=5, n_features=2, boolean_entities=(3, 4)):
    """Continuous channels everywhere except the listed entities, which carry a one-hot pair."""
    nodes = [f"E{i}" for i in range(n_entities)]
    channels = []
    for i in range(n_entities):
        if i in boolean_entities:
            chs = [Channel(f"s{f}", "boolean", f"state={f}") for f in range(n_features)]
        else:
            chs = [Channel(f"c{f}", "continuous", f"c{f}", 0.0, 1.0) for f in range(n_features)]
        channels.append(chs)
    return FeatureSchema(nodes, channels)


def tiny_params(n_entities=5, n_features=2, window=4, embed_dim=8, heads=2, top_k=3,
                seed=0, prior=None):
    cfg = ModelConfig(n_entities=n_entities, n_features=n_features, window=window,
                      embed_dim=embed_dim, temporal_heads=heads, spatial_heads=heads,
                      top_k=top_k, has_prior=prior is not None)
    return init_params(cfg, seed=seed, prior=prior)


def random_batch(rng, batch, window, n_entities, n_features, schema=None):
    x = rng.uniform(0.0, 1.0, size=(batch, window, n_entities, n_features))
    y = rng.uniform(0.0, 1.0, size=(batch, n_entities, n_features))
    if schema is not None:
        _, boo = schema.masks()
        y = np.where(boo, (y > 0.5).astype(float), y)
    return x, y
