import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def small_networks(n_schools=2, n_grades=3, n_students=24, male_share=0.5):
    from homophily_lab.population import default_networks

    return default_networks(n_schools, n_grades, n_students, male_share)


@pytest.fixture
def small_sim():
    from homophily_lab.population import SimConfig

    return SimConfig(networks=small_networks(), seed=11)


@pytest.fixture
def params():
    from homophily_lab.model import ModelParams

    return ModelParams()


def discrete_posterior(p0, lam, t, dt):
    """Bayes filter stepped at ``dt``: no signal in a step of a valuable
    interaction has probability 1 - lam*dt."""
    p = p0
    keep = 1.0 - lam * dt
    for _ in range(int(round(t / dt))):
        p = p * keep / (p * keep + 1.0 - p)
    return p


def toy_dyadic(n_clusters, nodes_per_cluster, gamma, rng, share=0.3, noise=1.0):
    """Independent homoskedastic dyadic panel: ``y = gamma * l + a_i + a_j + e``."""
    import pandas as pd

    a, b = np.triu_indices(nodes_per_cluster, 1)
    offsets = np.arange(n_clusters) * nodes_per_cluster
    ego = (offsets[:, None] + a[None, :]).ravel()
    alter = (offsets[:, None] + b[None, :]).ravel()
    node_fe = rng.normal(size=n_clusters * nodes_per_cluster)
    l = (rng.random(ego.size) < share).astype(float)
    y = gamma * l + node_fe[ego] + node_fe[alter] + noise * rng.normal(size=ego.size)
    return pd.DataFrame({"ego": ego, "alter": alter, "network": ego // nodes_per_cluster, "l": l, "y": y})


def dummy_ols(y, X, groups):
    """Explicit dummy-variable OLS; returns (slopes, residuals)."""
    blocks = [X]
    for k, g in enumerate(groups):
        _, codes = np.unique(np.asarray(g), return_inverse=True)
        D = np.eye(codes.max() + 1)[codes]
        blocks.append(D if k == 0 else D[:, 1:])
    Z = np.column_stack(blocks)
    coef, *_ = np.linalg.lstsq(Z, y, rcond=None)
    return coef[:X.shape[1]], y - Z @ coef
