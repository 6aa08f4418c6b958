#!/usr/bin/env python3
"""
DNN models as weighted DAGs for partitioning experiments.

A model is a directed acyclic graph whose vertices are neural layers (with a
FLOP cost) and whose edges are the features flowing between layers (with a
size in bytes). This module:
1. Defines the immutable ModelGraph and its vertex/edge types
2. Parses and serializes the line-oriented model file format
3. Synthesizes catalog models matching published aggregate metrics
4. Runs soundness checks used by `dds.py validate`

Units: FLOPs in FLOP, feature sizes in bytes.

Model file format:
    model <name>
    vertex <id> flops=<float> [label=<free text>]
    edge <src> <dst> bytes=<float>
    # comments run to the end of the line
"""

import math
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import networkx as nx
import numpy as np

# Raw input surrogate: a 224x224x3 image at one byte per value
DEFAULT_RAW_INPUT_BYTES = 602112
DEFAULT_RESULT_BYTES = 4096

# Published aggregates: name -> (vertices, edges, GFLOPs)
CATALOG = {
    "VGG11": (15, 14, 7.63),
    "ResNet34": (55, 57, 3.68),
    "ResNet50": (73, 75, 4.12),
    "ViT": (26, 32, 3.47),
}

# Catalog generator shape
FLOP_SPREAD = 10.0          # largest/smallest per-layer weight ratio
FIRST_FEATURE_RATIO = 0.5   # first feature size as a fraction of the raw input
LAST_FEATURE_RATIO = 0.1    # last feature size as a fraction of the raw input
MAX_SKIP_SPAN = 6

VERTEX_ID_PATTERN = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9_.:/\-]*$")


class ModelGraphError(ValueError):
    """A model graph violates a structural invariant."""


class ModelFormatError(ModelGraphError):
    """A model file line could not be parsed."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


@dataclass(frozen=True)
class LayerVertex:
    id: str
    flops: float
    label: str = ""


@dataclass(frozen=True)
class FeatureEdge:
    src: str
    dst: str
    feature_bytes: float


@dataclass(frozen=True)
class ModelGraph:
    """
    Immutable DNN graph with vertices stored in topological order.

    Construct through `build_model` (which sorts and validates) rather than
    directly; the constructor only accepts vertices already in topological
    order.
    """

    name: str
    vertices: tuple[LayerVertex, ...]
    edges: tuple[FeatureEdge, ...]

    def __post_init__(self):
        _check_structure(self.vertices, self.edges)
        for edge in self.edges:
            if self.index[edge.src] >= self.index[edge.dst]:
                raise ModelGraphError(
                    f"Vertices of '{self.name}' are not in topological order "
                    f"({edge.src} -> {edge.dst})"
                )
        sources = [v.id for v in self.vertices if not self.predecessors[v.id]]
        sinks = [v.id for v in self.vertices if not self.successors[v.id]]
        if len(sources) != 1:
            raise ModelGraphError(f"Model '{self.name}' needs exactly one source vertex, found {sources}")
        if len(sinks) != 1:
            raise ModelGraphError(f"Model '{self.name}' needs exactly one sink vertex, found {sinks}")

    @cached_property
    def index(self) -> dict[str, int]:
        return {v.id: i for i, v in enumerate(self.vertices)}

    @cached_property
    def flops(self) -> dict[str, float]:
        return {v.id: v.flops for v in self.vertices}

    @cached_property
    def successors(self) -> dict[str, tuple[FeatureEdge, ...]]:
        """Outgoing edges per vertex, ordered by the topological index of the head."""
        out = {v.id: [] for v in self.vertices}
        for edge in self.edges:
            out[edge.src].append(edge)
        return {vid: tuple(sorted(es, key=lambda e: self.index[e.dst])) for vid, es in out.items()}

    @cached_property
    def predecessors(self) -> dict[str, tuple[FeatureEdge, ...]]:
        into = {v.id: [] for v in self.vertices}
        for edge in self.edges:
            into[edge.dst].append(edge)
        return {vid: tuple(es) for vid, es in into.items()}

    @property
    def source_id(self) -> str:
        return self.vertices[0].id

    @property
    def sink_id(self) -> str:
        return self.vertices[-1].id

    @property
    def vertex_ids(self) -> tuple[str, ...]:
        return tuple(v.id for v in self.vertices)

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph(name=self.name)
        for v in self.vertices:
            graph.add_node(v.id, flops=v.flops, label=v.label)
        for e in self.edges:
            graph.add_edge(e.src, e.dst, feature_bytes=e.feature_bytes)
        return graph


def _check_weight(value: float, what: str) -> None:
    if not (math.isfinite(value) and value > 0):
        raise ModelGraphError(f"{what} must be a positive finite number, got {value}")


def _check_structure(vertices, edges) -> None:
    """Per-element invariants shared by build_model and ModelGraph."""
    ids = set()
    for v in vertices:
        if v.id in ids:
            raise ModelGraphError(f"Duplicate vertex id '{v.id}'")
        ids.add(v.id)
        _check_weight(v.flops, f"FLOPs of vertex '{v.id}'")

    if not ids:
        raise ModelGraphError("Model has no vertices")

    pairs = set()
    for e in edges:
        for endpoint in (e.src, e.dst):
            if endpoint not in ids:
                raise ModelGraphError(f"Edge {e.src} -> {e.dst} references unknown vertex '{endpoint}'")
        if e.src == e.dst:
            raise ModelGraphError(f"Self-loop on vertex '{e.src}'")
        if (e.src, e.dst) in pairs:
            raise ModelGraphError(f"Duplicate edge {e.src} -> {e.dst}")
        pairs.add((e.src, e.dst))
        _check_weight(e.feature_bytes, f"Feature size of edge {e.src} -> {e.dst}")


def build_model(name: str, vertices: list[LayerVertex], edges: list[FeatureEdge]) -> ModelGraph:
    """
    Validate a vertex/edge listing and return it as a ModelGraph.

    Vertices are reordered topologically; ties keep their listing order, so
    a listing that is already topological is left untouched.

    Raises:
        ModelGraphError: duplicate ids, dangling endpoints, nonpositive
            weights, cycles, or more than one source/sink
    """
    _check_structure(vertices, edges)

    graph = nx.DiGraph()
    position = {v.id: i for i, v in enumerate(vertices)}
    graph.add_nodes_from(position)
    graph.add_edges_from((e.src, e.dst) for e in edges)

    if not nx.is_directed_acyclic_graph(graph):
        cycle = nx.find_cycle(graph)
        path = " -> ".join([u for u, _ in cycle] + [cycle[-1][1]])
        raise ModelGraphError(f"Model '{name}' contains a cycle: {path}")

    order = list(nx.lexicographical_topological_sort(graph, key=position.get))
    by_id = {v.id: v for v in vertices}
    return ModelGraph(name=name, vertices=tuple(by_id[vid] for vid in order), edges=tuple(edges))


def _parse_float(token: str, key: str, line_no: int) -> float:
    prefix = f"{key}="
    if not token.startswith(prefix):
        raise ModelFormatError(line_no, f"expected '{prefix}<float>', got '{token}'")
    try:
        value = float(token[len(prefix):])
    except ValueError:
        raise ModelFormatError(line_no, f"'{token[len(prefix):]}' is not a number")
    if not (math.isfinite(value) and value > 0):
        raise ModelFormatError(line_no, f"{key} must be positive and finite, got {value}")
    return value


def _parse_id(token: str, line_no: int) -> str:
    if not VERTEX_ID_PATTERN.match(token):
        raise ModelFormatError(line_no, f"invalid vertex id '{token}'")
    return token


def parse_model(text: str) -> ModelGraph:
    """
    Parse a model file into a ModelGraph.

    Args:
        text: Contents of a model file

    Returns:
        Validated ModelGraph with vertices in topological order

    Raises:
        ModelFormatError: syntax problems, reported with the line number
        ModelGraphError: structural problems (cycles, multiple sources/sinks, ...)
    """
    name = None
    vertices = []
    edges = []
    seen_ids = set()

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue

        keyword, _, rest = line.partition(" ")
        tokens = rest.split()

        if keyword == "model":
            if name is not None:
                raise ModelFormatError(line_no, "duplicate 'model' header")
            if len(tokens) != 1:
                raise ModelFormatError(line_no, "expected 'model <name>'")
            name = tokens[0]

        elif keyword == "vertex":
            if name is None:
                raise ModelFormatError(line_no, "'vertex' before 'model' header")
            if len(tokens) < 2:
                raise ModelFormatError(line_no, "expected 'vertex <id> flops=<float> [label=<text>]'")
            vid = _parse_id(tokens[0], line_no)
            if vid in seen_ids:
                raise ModelFormatError(line_no, f"duplicate vertex '{vid}'")
            flops = _parse_float(tokens[1], "flops", line_no)
            label = ""
            if len(tokens) > 2:
                label_text = rest.split(None, 2)[2]
                if not label_text.startswith("label="):
                    raise ModelFormatError(line_no, f"unexpected '{tokens[2]}'")
                label = label_text[len("label="):].strip()
            seen_ids.add(vid)
            vertices.append(LayerVertex(id=vid, flops=flops, label=label))

        elif keyword == "edge":
            if name is None:
                raise ModelFormatError(line_no, "'edge' before 'model' header")
            if len(tokens) != 3:
                raise ModelFormatError(line_no, "expected 'edge <src> <dst> bytes=<float>'")
            src = _parse_id(tokens[0], line_no)
            dst = _parse_id(tokens[1], line_no)
            size = _parse_float(tokens[2], "bytes", line_no)
            edges.append(FeatureEdge(src=src, dst=dst, feature_bytes=size))

        else:
            raise ModelFormatError(line_no, f"unknown keyword '{keyword}'")

    if name is None:
        raise ModelFormatError(1, "missing 'model <name>' header")

    return build_model(name, vertices, edges)


def serialize_model(g: ModelGraph) -> str:
    """Canonical model file text (vertices in topological order)."""
    lines = [f"model {g.name}"]
    for v in g.vertices:
        line = f"vertex {v.id} flops={v.flops!r}"
        if v.label:
            line += f" label={v.label}"
        lines.append(line)
    for e in g.edges:
        lines.append(f"edge {e.src} {e.dst} bytes={e.feature_bytes!r}")
    return "\n".join(lines) + "\n"


def load_model(path: str) -> ModelGraph:
    model_path = Path(path)
    if not model_path.exists():
        raise FileNotFoundError(f"No such model file: {path}")
    return parse_model(model_path.read_text(encoding="utf-8"))


def total_flops(g: ModelGraph) -> float:
    return math.fsum(v.flops for v in g.vertices)


def upload_bytes(g: ModelGraph, vertex_id: str) -> float:
    """
    Size of the tensor a vertex uploads when its successors run on the server.

    All successors are assumed to consume the same output tensor, so the
    first outgoing edge (in topological order of its head) designates it.
    Zero for the sink.
    """
    out = g.successors[vertex_id]
    return out[0].feature_bytes if out else 0.0


def catalog_model(
    name: str,
    seed: int = 0,
    raw_input_bytes: float = DEFAULT_RAW_INPUT_BYTES,
) -> ModelGraph:
    """
    Synthesize a catalog model matching its published vertex/edge/GFLOP counts.

    The graph is a chain backbone plus forward skip edges until the edge
    count matches. Total FLOPs are split over layers by a seeded log-uniform
    partition, and feature sizes decrease geometrically from half the raw
    input down to a tenth of it. Every outgoing edge of a vertex carries the
    same size.

    Args:
        name: One of CATALOG's keys
        seed: Generator seed; the same (name, seed) always yields the same graph
        raw_input_bytes: Raw input size the feature sizes are scaled from

    Returns:
        Synthetic ModelGraph with vertex ids v1..vn
    """
    if name not in CATALOG:
        raise ModelGraphError(f"Unknown model '{name}'. Available: {', '.join(CATALOG)}")

    n_vertices, n_edges, gflops = CATALOG[name]
    rng = np.random.default_rng([seed, list(CATALOG).index(name)])

    weights = np.exp(rng.uniform(0.0, math.log(FLOP_SPREAD), size=n_vertices))
    shares = weights / weights.sum()
    flops = shares * (gflops * 1e9)

    first = raw_input_bytes * FIRST_FEATURE_RATIO
    last = raw_input_bytes * LAST_FEATURE_RATIO
    steps = max(n_vertices - 2, 1)
    sizes = first * (last / first) ** (np.arange(n_vertices) / steps)

    ids = [f"v{k + 1}" for k in range(n_vertices)]
    vertices = [
        LayerVertex(id=ids[k], flops=float(flops[k]), label=f"{name}/layer{k + 1}")
        for k in range(n_vertices)
    ]

    pairs = [(k, k + 1) for k in range(n_vertices - 1)]
    taken = set(pairs)
    while len(pairs) < n_edges:
        u = int(rng.integers(0, n_vertices - 2))
        span = int(rng.integers(2, min(MAX_SKIP_SPAN, n_vertices - 1 - u) + 1))
        if (u, u + span) not in taken:
            taken.add((u, u + span))
            pairs.append((u, u + span))

    edges = [FeatureEdge(src=ids[u], dst=ids[v], feature_bytes=float(sizes[u])) for u, v in sorted(pairs)]
    return build_model(name, vertices, edges)


def check_model(g: ModelGraph, raw_input_bytes: float = DEFAULT_RAW_INPUT_BYTES) -> list[str]:
    """
    Soundness warnings for a model; an empty list means nothing to report.

    Checks that fan-out vertices give all outgoing edges the same feature
    size (split arcs only charge the first) and that some feature is smaller
    than the raw input (otherwise partial offloading never pays off).
    """
    warnings = []
    for v in g.vertices:
        sizes = {e.feature_bytes for e in g.successors[v.id]}
        if len(sizes) > 1:
            warnings.append(
                f"Vertex '{v.id}' fans out with unequal feature sizes {sorted(sizes)}; "
                f"uploads are charged {upload_bytes(g, v.id)} bytes"
            )
    if g.edges and min(e.feature_bytes for e in g.edges) >= raw_input_bytes:
        warnings.append(f"No feature is smaller than the raw input ({raw_input_bytes} bytes)")
    return warnings
