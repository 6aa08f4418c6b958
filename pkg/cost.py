#!/usr/bin/env python3
"""
Inference latency and cost model for partitioned DNN execution.

A partition strategy splits a model into a local part (run on the device)
and a server part (run on the edge server). For a device with compute rate
E (FLOP/s) and bandwidth B (bytes/s), and a server allocation g (FLOP/s):

    T_local  = alpha_local * (local FLOPs) / E
    T_server = alpha_server * (server FLOPs) / g
    T_net    = (uploaded + raw input + result bytes) / B
    cost     = T_local + T_net + T_server + gamma * a

where a is the device's budget bid and gamma the unit cost of budget.
"""

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from model_graph import DEFAULT_RAW_INPUT_BYTES, DEFAULT_RESULT_BYTES, ModelGraph, upload_bytes

if TYPE_CHECKING:
    from partition import PartitionStrategy

# Finite stand-in for an infinite latency/capacity (seconds)
INFINITE_LATENCY = 1e18


class ProfileError(ValueError):
    """A device or server profile holds an invalid value."""


def _check_positive(value: float, what: str) -> None:
    if not (math.isfinite(value) and value > 0):
        raise ProfileError(f"{what} must be a positive finite number, got {value}")


@dataclass(frozen=True)
class DeviceProfile:
    """
    One mobile device: its compute rate, link bandwidth and model.

    Args:
        id: Device identifier
        compute: Local compute rate in FLOP/s
        bandwidth: Uplink/downlink bandwidth in bytes/s
        model: The DNN this device runs
        alpha_local: Local overhead factor
        raw_input_bytes: Size of the raw input uploaded when the first layer is offloaded
        result_bytes: Size of the result downloaded when the last layer is offloaded
    """

    id: str
    compute: float
    bandwidth: float
    model: ModelGraph = field(repr=False)
    alpha_local: float = 1.0
    raw_input_bytes: float = DEFAULT_RAW_INPUT_BYTES
    result_bytes: float = DEFAULT_RESULT_BYTES

    def __post_init__(self):
        _check_positive(self.compute, f"Compute of device '{self.id}'")
        _check_positive(self.bandwidth, f"Bandwidth of device '{self.id}'")
        _check_positive(self.alpha_local, f"alpha_local of device '{self.id}'")
        _check_positive(self.raw_input_bytes, f"Raw input size of device '{self.id}'")
        _check_positive(self.result_bytes, f"Result size of device '{self.id}'")


@dataclass(frozen=True)
class ServerProfile:
    """Edge server with total capacity S (FLOP/s)."""

    capacity: float
    alpha_server: float = 1.0

    def __post_init__(self):
        _check_positive(self.capacity, "Server capacity")
        _check_positive(self.alpha_server, "alpha_server")


@dataclass(frozen=True)
class CostBreakdown:
    t_local: float
    t_net: float
    t_server: float
    t_total: float
    charge: float
    cost: float


def local_flops(p: "PartitionStrategy") -> float:
    return math.fsum(p.model.flops[v] for v in p.local_set)


def server_flops(p: "PartitionStrategy", g: ModelGraph | None = None) -> float:
    """FLOPs placed on the server (the c_i of the budget game)."""
    flops = (p.model if g is None else g).flops
    return math.fsum(flops[v] for v in p.server_set)


def server_seconds(flops: float, alpha_server: float, g_alloc: float) -> float:
    """Server time for a FLOP load; INFINITE_LATENCY when work meets zero allocation."""
    if flops == 0:
        return 0.0
    if g_alloc <= 0:
        return INFINITE_LATENCY
    return alpha_server * flops / g_alloc


def local_latency(p: "PartitionStrategy", dev: DeviceProfile) -> float:
    return dev.alpha_local * local_flops(p) / dev.compute


def server_latency(p: "PartitionStrategy", srv: ServerProfile, g_alloc: float) -> float:
    return server_seconds(server_flops(p), srv.alpha_server, g_alloc)


def transferred_bytes(p: "PartitionStrategy", dev: DeviceProfile) -> float:
    """
    Bytes crossing the link under a strategy.

    Each local vertex with at least one server successor uploads its output
    once, however many server successors it has. The raw input goes up when
    the first layer is offloaded and the result comes down when the last one is.
    """
    g = p.model
    uploads = [
        upload_bytes(g, u)
        for u in p.local_set
        if any(e.dst in p.server_set for e in g.successors[u])
    ]
    if g.source_id in p.server_set:
        uploads.append(dev.raw_input_bytes)
    if g.sink_id in p.server_set:
        uploads.append(dev.result_bytes)
    return math.fsum(uploads)


def transmission_latency(p: "PartitionStrategy", dev: DeviceProfile) -> float:
    return transferred_bytes(p, dev) / dev.bandwidth


def inference_cost(
    p: "PartitionStrategy",
    dev: DeviceProfile,
    srv: ServerProfile,
    g_alloc: float,
    a: float = 0.0,
    gamma: float = 0.0,
) -> CostBreakdown:
    """
    Full latency and cost breakdown of running a strategy.

    Args:
        p: Partition strategy over dev.model
        dev: Device profile
        srv: Server profile
        g_alloc: Server compute allocated to this device (FLOP/s)
        a: Budget the device bid
        gamma: Unit cost of budget

    Returns:
        CostBreakdown with t_total = t_local + t_net + t_server and
        cost = t_total + gamma * a
    """
    t_local = local_latency(p, dev)
    t_net = transmission_latency(p, dev)
    t_server = server_latency(p, srv, g_alloc)
    t_total = t_local + t_net + t_server
    return CostBreakdown(
        t_local=t_local,
        t_net=t_net,
        t_server=t_server,
        t_total=t_total,
        charge=a,
        cost=t_total + gamma * a,
    )
