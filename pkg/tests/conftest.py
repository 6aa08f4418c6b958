import numpy as np
import pytest

from cost import DeviceProfile, ServerProfile
from model_graph import FeatureEdge, LayerVertex, build_model, parse_model

DIAMOND_TEXT = """\
# v1 fans out to v2 and v3, which merge in v4
model diamond
vertex v1 flops=1e9
vertex v2 flops=2e9
vertex v3 flops=3e9
vertex v4 flops=4e9
edge v1 v2 bytes=1e6
edge v1 v3 bytes=1e6
edge v2 v4 bytes=5e5
edge v3 v4 bytes=5e5
"""


@pytest.fixture
def diamond_text():
    return DIAMOND_TEXT


@pytest.fixture
def diamond():
    return parse_model(DIAMOND_TEXT)


@pytest.fixture
def chain():
    """Chain of n layers with the given FLOPs and feature sizes."""

    def build(flops, sizes, name="chain"):
        vertices = [LayerVertex(id=f"v{k + 1}", flops=f) for k, f in enumerate(flops)]
        edges = [FeatureEdge(src=f"v{k + 1}", dst=f"v{k + 2}", feature_bytes=s) for k, s in enumerate(sizes)]
        return build_model(name, vertices, edges)

    return build


@pytest.fixture
def make_device():
    def build(model, compute=1e9, bandwidth=1e6, **kwargs):
        return DeviceProfile(id=kwargs.pop("id", "dev"), compute=compute, bandwidth=bandwidth, model=model, **kwargs)

    return build


@pytest.fixture
def server():
    return ServerProfile(capacity=1e12)


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


@pytest.fixture
def random_instance():
    """
    Random single-source/single-sink DAG plus a random device and allocation.

    Every non-first vertex gets a predecessor and every non-last vertex a
    successor, then a few extra forward edges are sprinkled in.
    """

    def build(rng, max_vertices=8):
        n = int(rng.integers(1, max_vertices + 1))
        ids = [f"v{k + 1}" for k in range(n)]
        pairs = set()
        for k in range(1, n):
            pairs.add((int(rng.integers(0, k)), k))
        for k in range(n - 1):
            pairs.add((k, int(rng.integers(k + 1, n))))
        for _ in range(int(rng.integers(0, n + 1))):
            if n > 1:
                u = int(rng.integers(0, n - 1))
                pairs.add((u, int(rng.integers(u + 1, n))))

        vertices = [LayerVertex(id=i, flops=_log_uniform(rng, 1e8, 1e10)) for i in ids]
        edges = [
            FeatureEdge(src=ids[u], dst=ids[v], feature_bytes=_log_uniform(rng, 1e3, 1e7))
            for u, v in sorted(pairs)
        ]
        model = build_model("random", vertices, edges)
        dev = DeviceProfile(
            id="dev",
            compute=_log_uniform(rng, 1e9, 2e10),
            bandwidth=_log_uniform(rng, 1e5, 1e7),
            model=model,
            alpha_local=_log_uniform(rng, 0.5, 2.0),
            raw_input_bytes=_log_uniform(rng, 1e4, 1e7),
            result_bytes=_log_uniform(rng, 1e2, 1e6),
        )
        g_alloc = 0.0 if rng.random() < 0.05 else _log_uniform(rng, 1e9, 1e11)
        alpha_server = _log_uniform(rng, 0.5, 2.0)
        return model, dev, g_alloc, alpha_server

    return build
