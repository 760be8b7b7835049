import numpy as np
import pytest

from dhtfed.model import LocalDataset
from dhtfed.overlay import Overlay, random_ids
from dhtfed.simnet import LinkModel, Simulator
from dhtfed.tree import TreeConfig, TreeManager


def build_world(n, fanout=16, seed=42, intercept=True, group="g",
                lat=(10.0, 50.0), bandwidth=1048.576, heartbeat=1000.0,
                timeout=3000.0):
    """Overlay + simulator + one fully joined tree; returns the lot."""
    ids = random_ids(n, seed)
    overlay = Overlay.build(ids)
    sim = Simulator(seed=seed, link=LinkModel(lat[0], lat[1], bandwidth),
                    alive=overlay.is_alive)
    trees = TreeManager(overlay, sim, TreeConfig(
        fanout_cap=fanout, heartbeat_period=heartbeat,
        failure_timeout=timeout, intercept_joins=intercept))
    gid, root = trees.create_group(group)
    for nid in ids:
        if nid != root:
            trees.join_group(nid, gid)
    return ids, overlay, sim, trees, gid, root


def gaussian_data(ids, hidden_dim, seed, n_per_node=40, spread=1.5):
    """Linearly separable per-node datasets along the first axis."""
    out = {}
    rng0 = np.random.default_rng(seed)
    axis = np.eye(hidden_dim)[0]
    for nid in sorted(ids):
        rng = np.random.default_rng([seed, nid])
        y = rng.integers(0, 2, size=n_per_node)
        x = rng.normal(size=(n_per_node, hidden_dim))
        x += np.where(y[:, None] == 1, spread, -spread) * axis
        out[nid] = LocalDataset(x, y)
    del rng0
    return out


@pytest.fixture
def small_world():
    return build_world(20, fanout=4, seed=7)
