#!/usr/bin/env python3
"""
Latency graph construction and minimum-cut partitioning.

For a model, a device and a server allocation, build a flow network whose
l-s cuts correspond one-to-one to valid partition strategies and whose cut
capacity equals the strategy's end-to-end latency. The minimum cut is then
the latency-optimal partition.

Network layout (l = local source, s = server sink):
    (u, w)        feature transfer for single-successor vertices
    (u, u'), (u', w)  split arc charging a fan-out vertex's upload once,
                  followed by infinite arcs to each successor
    (l, v)        server compute time of v (paid when v runs on the server)
    (v, s)        local compute time of v (paid when v runs locally)
    (l, i), (i, v1)  raw input upload
    (l, o), (o, vn)  result download
    (w, u)        infinite guard per model edge (u, w); keeps server sets
                  closed under successors
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import networkx as nx
from networkx.algorithms.flow import edmonds_karp

from cost import (
    INFINITE_LATENCY,
    DeviceProfile,
    ProfileError,
    local_latency,
    server_seconds,
    server_flops,
    transmission_latency,
)
from model_graph import ModelGraph, upload_bytes

# Exhaustive search is exponential in the worst case
MAX_ENUMERATION_VERTICES = 20

# Residual arcs below this fraction of the flow value count as saturated
RESIDUAL_TOLERANCE = 1e-12

# Pseudo-vertex id for the raw-input edge in PartitionStrategy.cut_edges
RAW_INPUT = "@input"


class PartitionError(RuntimeError):
    """The latency graph or its minimum cut is malformed."""


class ArcTag(str, Enum):
    ORIGINAL_EDGE = "ORIGINAL_EDGE"
    SPLIT_EDGE = "SPLIT_EDGE"
    LOCAL_COMPUTE = "LOCAL_COMPUTE"
    SERVER_COMPUTE = "SERVER_COMPUTE"
    RAW_UPLOAD = "RAW_UPLOAD"
    RESULT_DOWNLOAD = "RESULT_DOWNLOAD"
    INFINITE = "INFINITE"
    PRECEDENCE = "PRECEDENCE"


class Node(NamedTuple):
    kind: str  # "layer", "twin" or "virtual"
    name: str

    def __str__(self) -> str:
        return f"{self.name}'" if self.kind == "twin" else self.name


LOCAL = Node("virtual", "l")
SERVER = Node("virtual", "s")
INPUT = Node("virtual", "i")
OUTPUT = Node("virtual", "o")


@dataclass(frozen=True)
class Arc:
    tail: Node
    head: Node
    capacity: float
    tag: ArcTag
    origin: object = None  # model vertex id or (src, dst) edge this arc stands for


@dataclass(frozen=True)
class LatencyGraph:
    """Flow network for one (model, device, allocation) triple."""

    model: ModelGraph = field(repr=False)
    nodes: tuple[Node, ...]
    arcs: tuple[Arc, ...]
    guards: tuple[Arc, ...]

    @property
    def source(self) -> Node:
        return LOCAL

    @property
    def sink(self) -> Node:
        return SERVER

    @property
    def back_map(self) -> dict[tuple[Node, Node], Arc]:
        return {(a.tail, a.head): a for a in self.arcs + self.guards}

    def to_networkx(self, with_guards: bool = True) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(self.nodes)
        for arc in self.arcs + (self.guards if with_guards else ()):
            graph.add_edge(arc.tail, arc.head, capacity=arc.capacity, tag=arc.tag)
        return graph


@dataclass(frozen=True)
class PartitionStrategy:
    """
    Assignment of every model vertex to the device or the server.

    cut_edges lists the model edges running from local to server vertices,
    plus (RAW_INPUT, v1) when the first layer is offloaded.
    """

    model: ModelGraph = field(repr=False, compare=False)
    local_set: frozenset[str]
    server_set: frozenset[str]
    cut_edges: tuple[tuple[str, str], ...]

    @property
    def is_all_local(self) -> bool:
        return not self.server_set

    def describe(self) -> str:
        order = self.model.vertex_ids
        local = [v for v in order if v in self.local_set]
        server = [v for v in order if v in self.server_set]
        return f"local=[{', '.join(local)}] server=[{', '.join(server)}]"


def strategy_from_server_set(g: ModelGraph, server_set) -> PartitionStrategy:
    """
    Build the strategy that offloads exactly `server_set`.

    Raises:
        PartitionError: when server_set names unknown vertices
    """
    server = frozenset(server_set)
    unknown = server - set(g.vertex_ids)
    if unknown:
        raise PartitionError(f"Unknown vertices in server set: {sorted(unknown)}")
    local = frozenset(g.vertex_ids) - server
    cut = [(e.src, e.dst) for e in g.edges if e.src in local and e.dst in server]
    if g.source_id in server:
        cut.insert(0, (RAW_INPUT, g.source_id))
    return PartitionStrategy(model=g, local_set=local, server_set=server, cut_edges=tuple(cut))


def all_local(g: ModelGraph) -> PartitionStrategy:
    return strategy_from_server_set(g, ())


def all_server(g: ModelGraph) -> PartitionStrategy:
    return strategy_from_server_set(g, g.vertex_ids)


def is_valid_cut(p: PartitionStrategy, g: ModelGraph) -> bool:
    """True iff no model edge runs from a server vertex back to a local one."""
    return not any(e.src in p.server_set and e.dst in p.local_set for e in g.edges)


def build_latency_graph(
    g: ModelGraph,
    dev: DeviceProfile,
    g_alloc: float,
    alpha_server: float = 1.0,
) -> LatencyGraph:
    """
    Build the latency graph for a model on a device with a server allocation.

    Args:
        g: Model graph
        dev: Device profile (compute, bandwidth, raw/result sizes)
        g_alloc: Server FLOP/s allocated to the device; zero makes every
            server compute arc infinite
        alpha_server: Server overhead factor

    Returns:
        LatencyGraph with |V| + splits + 4 nodes and |E| + splits + 4 + 2|V|
        arcs, plus one precedence guard per model edge
    """
    if not (g_alloc >= 0 and math.isfinite(g_alloc)):
        raise ProfileError(f"Server allocation must be a non-negative finite number, got {g_alloc}")
    if not (alpha_server > 0 and math.isfinite(alpha_server)):
        raise ProfileError(f"alpha_server must be a positive finite number, got {alpha_server}")

    layers = [Node("layer", v.id) for v in g.vertices]
    twins = []
    arcs = []

    for v in g.vertices:
        out = g.successors[v.id]
        if len(out) > 1:
            twin = Node("twin", v.id)
            twins.append(twin)
            arcs.append(Arc(Node("layer", v.id), twin, upload_bytes(g, v.id) / dev.bandwidth, ArcTag.SPLIT_EDGE, v.id))
            for e in out:
                arcs.append(Arc(twin, Node("layer", e.dst), INFINITE_LATENCY, ArcTag.INFINITE, (e.src, e.dst)))
        elif out:
            e = out[0]
            arcs.append(
                Arc(Node("layer", e.src), Node("layer", e.dst), e.feature_bytes / dev.bandwidth, ArcTag.ORIGINAL_EDGE, (e.src, e.dst))
            )

    first = Node("layer", g.source_id)
    last = Node("layer", g.sink_id)
    arcs.append(Arc(LOCAL, INPUT, dev.raw_input_bytes / dev.bandwidth, ArcTag.RAW_UPLOAD))
    arcs.append(Arc(INPUT, first, INFINITE_LATENCY, ArcTag.INFINITE))
    arcs.append(Arc(LOCAL, OUTPUT, dev.result_bytes / dev.bandwidth, ArcTag.RESULT_DOWNLOAD))
    # Oriented into the sink so the download is charged exactly when it is offloaded
    arcs.append(Arc(OUTPUT, last, INFINITE_LATENCY, ArcTag.INFINITE))

    for v in g.vertices:
        node = Node("layer", v.id)
        arcs.append(Arc(LOCAL, node, server_seconds(v.flops, alpha_server, g_alloc), ArcTag.SERVER_COMPUTE, v.id))
        arcs.append(Arc(node, SERVER, dev.alpha_local * v.flops / dev.compute, ArcTag.LOCAL_COMPUTE, v.id))

    guards = tuple(
        Arc(Node("layer", e.dst), Node("layer", e.src), INFINITE_LATENCY, ArcTag.PRECEDENCE, (e.src, e.dst))
        for e in g.edges
    )

    return LatencyGraph(
        model=g,
        nodes=tuple(layers + twins + [LOCAL, SERVER, INPUT, OUTPUT]),
        arcs=tuple(arcs),
        guards=guards,
    )


def _reduced_network(lg: LatencyGraph) -> nx.DiGraph:
    """
    Flow network with terminal arcs reduced.

    Every layer has both (l, v) and (v, s); pushing their common minimum
    straight through leaves the same minimum cut with less flow to route.
    Zero-capacity arcs are dropped.
    """
    server_cap = {a.head: a.capacity for a in lg.arcs if a.tag is ArcTag.SERVER_COMPUTE}
    local_cap = {a.tail: a.capacity for a in lg.arcs if a.tag is ArcTag.LOCAL_COMPUTE}

    network = nx.DiGraph()
    network.add_nodes_from(lg.nodes)
    for arc in lg.arcs + lg.guards:
        capacity = arc.capacity
        if arc.tag is ArcTag.SERVER_COMPUTE:
            capacity -= min(capacity, local_cap[arc.head])
        elif arc.tag is ArcTag.LOCAL_COMPUTE:
            capacity -= min(server_cap[arc.tail], capacity)
        if capacity > 0:
            network.add_edge(arc.tail, arc.head, capacity=capacity)
    return network


def min_cut(lg: LatencyGraph) -> tuple[float, PartitionStrategy]:
    """
    Minimum l-s cut of a latency graph.

    Returns the source-side-minimal cut: the local side is exactly what
    stays reachable from l in the final residual network.

    Returns:
        (cut value in seconds, optimal PartitionStrategy)

    Raises:
        PartitionError: when s is unreachable from l or the cut would cross
            an infinite arc
    """
    full = lg.to_networkx(with_guards=False)
    if LOCAL not in full or SERVER not in full or not nx.has_path(full, LOCAL, SERVER):
        raise PartitionError("Latency graph has no path from l to s")

    residual = edmonds_karp(_reduced_network(lg), LOCAL, SERVER, capacity="capacity")
    tolerance = RESIDUAL_TOLERANCE * residual.graph["flow_value"]

    local_side = {LOCAL}
    frontier = [LOCAL]
    while frontier:
        u = frontier.pop()
        for v, attr in residual[u].items():
            if v not in local_side and attr["capacity"] - attr["flow"] > tolerance:
                local_side.add(v)
                frontier.append(v)

    if SERVER in local_side:
        raise PartitionError("Residual network still connects l to s")

    crossing = [a for a in lg.arcs + lg.guards if a.tail in local_side and a.head not in local_side]
    infinite = [a for a in crossing if a.capacity >= INFINITE_LATENCY]
    if infinite:
        raise PartitionError(f"Minimum cut crosses infinite arc {infinite[0].tail} -> {infinite[0].head}")

    server_set = {n.name for n in lg.nodes if n.kind == "layer" and n not in local_side}
    strategy = strategy_from_server_set(lg.model, server_set)
    if not is_valid_cut(strategy, lg.model):
        raise PartitionError("Minimum cut produced an invalid strategy")

    return math.fsum(a.capacity for a in crossing), strategy


def _successor_closed_sets(g: ModelGraph) -> list[frozenset[str]]:
    """Every server set closed under successors (the valid strategies)."""
    sets = [frozenset()]
    for v in reversed(g.vertices):
        succ = {e.dst for e in g.successors[v.id]}
        sets += [s | {v.id} for s in sets if succ <= s]
    return sets


def brute_force_optimal(
    g: ModelGraph,
    dev: DeviceProfile,
    g_alloc: float,
    alpha_server: float = 1.0,
) -> tuple[float, PartitionStrategy]:
    """
    Latency-optimal strategy by exhaustive enumeration.

    Reference oracle for min_cut on small graphs. Ties go to the smaller
    server set.

    Raises:
        PartitionError: when the model has more than MAX_ENUMERATION_VERTICES vertices
    """
    if len(g.vertices) > MAX_ENUMERATION_VERTICES:
        raise PartitionError(
            f"Exhaustive search limited to {MAX_ENUMERATION_VERTICES} vertices, model has {len(g.vertices)}"
        )

    best = None
    for server_set in sorted(_successor_closed_sets(g), key=len):
        p = strategy_from_server_set(g, server_set)
        latency = (
            local_latency(p, dev)
            + transmission_latency(p, dev)
            + server_seconds(server_flops(p), alpha_server, g_alloc)
        )
        if best is None or latency < best[0]:
            best = (latency, p)
    return best


def dump_latency_graph(lg: LatencyGraph) -> str:
    """DOT-like text, one `arc <tail> <head> cap=<float> tag=<tag>` line per arc, guards last."""
    lines = [f"# latency graph for {lg.model.name}: {len(lg.nodes)} nodes, {len(lg.arcs)} arcs, {len(lg.guards)} guards"]
    for arc in lg.arcs + lg.guards:
        capacity = "inf" if arc.capacity >= INFINITE_LATENCY else f"{arc.capacity:.9g}"
        lines.append(f"arc {arc.tail} {arc.head} cap={capacity} tag={arc.tag.value}")
    return "\n".join(lines) + "\n"
