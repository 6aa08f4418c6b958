#!/usr/bin/env python3
"""
Fleet simulations of the budget game and its baselines.

Samples a heterogeneous fleet of devices, runs the decentralized budget
game round by round against a shared price board, and evaluates three
baselines at an equal split of the server:
    EO   - everything runs on the device
    SO   - everything runs on the server
    DADS - latency-optimal partition at an equal server share

Scenario files are key = value lines (see scenarios/default.txt). Bandwidths
are given in Mbit/s, compute in GFLOP/s and server capacity in TFLOP/s.
"""

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from cost import CostBreakdown, DeviceProfile, ServerProfile, inference_cost, local_latency, server_flops
from game import (
    DEFAULT_EPSILON,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MAX_ITERS,
    DEFAULT_MOMENTUM_DECAY,
    DEFAULT_PRICE_TARGET,
    DEFAULT_SNIFF_GRID,
    DEFAULT_SNIFF_PERIOD,
    DEFAULT_WINDOW,
    GameConfig,
    GameState,
    PriceBoard,
    allocate,
    calibrate_gamma,
    device_iteration,
)
from model_graph import CATALOG, DEFAULT_RAW_INPUT_BYTES, DEFAULT_RESULT_BYTES, catalog_model, total_flops
from partition import PartitionStrategy, all_local, all_server, build_latency_graph, min_cut

BYTES_PER_MBIT = 125_000
SCHEDULES = ("random-permutation", "round-robin")
METHODS = ("EO", "SO", "DADS", "DDS")

# Seed-sequence stream tags
DEVICE_STREAM = 1
SCHEDULE_STREAM = 2


class ScenarioError(ValueError):
    """A scenario file or setting is invalid."""


@dataclass(frozen=True)
class ScenarioConfig:
    device_count: int = 100
    bandwidth_mbps: tuple[float, float] = (5.0, 10.0)
    compute_gflops: tuple[float, float] = (10.0, 20.0)
    models: tuple[str, ...] = tuple(CATALOG)
    server_tflops: float = 1.2
    gamma: float | None = None  # None calibrates from the fleet
    price_target: float = DEFAULT_PRICE_TARGET
    a0_fraction: float = 0.0
    seed: int = 0
    schedule: str = "random-permutation"
    alpha_local: float = 1.0
    alpha_server: float = 1.0
    raw_input_bytes: float = DEFAULT_RAW_INPUT_BYTES
    result_bytes: float = DEFAULT_RESULT_BYTES
    learning_rate: float = DEFAULT_LEARNING_RATE
    momentum_decay: float = DEFAULT_MOMENTUM_DECAY
    sniff_period: int = DEFAULT_SNIFF_PERIOD
    sniff_grid: int = DEFAULT_SNIFF_GRID
    max_iters: int = DEFAULT_MAX_ITERS
    epsilon: float = DEFAULT_EPSILON
    window: int = DEFAULT_WINDOW
    tracked_device: int = 0

    def __post_init__(self):
        if self.device_count < 1:
            raise ScenarioError(f"device_count must be at least 1, got {self.device_count}")
        for name, (lo, hi) in (("bandwidth_mbps", self.bandwidth_mbps), ("compute_gflops", self.compute_gflops)):
            if not 0 < lo <= hi:
                raise ScenarioError(f"{name} range must satisfy 0 < low <= high, got {lo}, {hi}")
        if not self.models:
            raise ScenarioError("models must name at least one catalog model")
        unknown = [m for m in self.models if m not in CATALOG]
        if unknown:
            raise ScenarioError(f"Unknown models {unknown}. Available: {', '.join(CATALOG)}")
        if not self.server_tflops > 0:
            raise ScenarioError(f"server_tflops must be positive, got {self.server_tflops}")
        if not 0 <= self.a0_fraction <= 1:
            raise ScenarioError(f"a0_fraction must be in [0, 1], got {self.a0_fraction}")
        if self.schedule not in SCHEDULES:
            raise ScenarioError(f"schedule must be one of {SCHEDULES}, got '{self.schedule}'")
        if self.seed < 0:
            raise ScenarioError(f"seed must be non-negative, got {self.seed}")
        if not 0 <= self.tracked_device < self.device_count:
            raise ScenarioError(f"tracked_device must index a device, got {self.tracked_device}")

    @property
    def capacity(self) -> float:
        return self.server_tflops * 1e12

    def game_config(self, gamma: float) -> GameConfig:
        return GameConfig(
            gamma=gamma,
            learning_rate=self.learning_rate,
            momentum_decay=self.momentum_decay,
            sniff_period=self.sniff_period,
            sniff_grid=self.sniff_grid,
            max_iters=self.max_iters,
            epsilon=self.epsilon,
            window=self.window,
        )


def _parse_range(text: str) -> tuple[float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2:
        raise ValueError(f"expected '<low>,<high>', got '{text}'")
    return float(parts[0]), float(parts[1])


def _parse_gamma(text: str) -> float | None:
    return None if text.lower() == "auto" else float(text)


SCENARIO_KEYS = {
    "device_count": int,
    "bandwidth_mbps": _parse_range,
    "compute_gflops": _parse_range,
    "models": lambda text: tuple(m.strip() for m in text.split(",") if m.strip()),
    "server_tflops": float,
    "gamma": _parse_gamma,
    "price_target": float,
    "a0_fraction": float,
    "seed": int,
    "schedule": str,
    "alpha_local": float,
    "alpha_server": float,
    "raw_input_bytes": float,
    "result_bytes": float,
    "learning_rate": float,
    "momentum_decay": float,
    "sniff_period": int,
    "sniff_grid": int,
    "max_iters": int,
    "epsilon": float,
    "window": int,
    "tracked_device": int,
}


def parse_scenario(text: str, base: ScenarioConfig | None = None) -> ScenarioConfig:
    """
    Parse key = value scenario text on top of a base config.

    Raises:
        ScenarioError: unknown keys, malformed values or invalid settings
    """
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep:
            raise ScenarioError(f"line {line_no}: expected '<key> = <value>'")
        if key not in SCENARIO_KEYS:
            raise ScenarioError(f"line {line_no}: unknown key '{key}'")
        try:
            values[key] = SCENARIO_KEYS[key](value)
        except ValueError as e:
            raise ScenarioError(f"line {line_no}: bad value for '{key}': {e}")
    return replace(base or ScenarioConfig(), **values)


def load_scenario(path: str, base: ScenarioConfig | None = None) -> ScenarioConfig:
    scenario_path = Path(path)
    if not scenario_path.exists():
        raise FileNotFoundError(f"No such scenario file: {path}")
    return parse_scenario(scenario_path.read_text(encoding="utf-8"), base)


def scenario_text(cfg: ScenarioConfig) -> str:
    """Render a config back into scenario-file lines."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = "auto"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def sample_devices(cfg: ScenarioConfig) -> list[DeviceProfile]:
    """
    Sample a fleet; device i depends only on (seed, i), so a fleet of N is
    the prefix of any larger fleet with the same seed.
    """
    graphs = {name: catalog_model(name, cfg.seed, cfg.raw_input_bytes) for name in cfg.models}
    devices = []
    for i in range(cfg.device_count):
        rng = np.random.default_rng([cfg.seed, DEVICE_STREAM, i])
        bandwidth = rng.uniform(*cfg.bandwidth_mbps) * BYTES_PER_MBIT
        compute = rng.uniform(*cfg.compute_gflops) * 1e9
        model = cfg.models[int(rng.integers(len(cfg.models)))]
        devices.append(
            DeviceProfile(
                id=f"d{i:03d}",
                compute=compute,
                bandwidth=bandwidth,
                model=graphs[model],
                alpha_local=cfg.alpha_local,
                raw_input_bytes=cfg.raw_input_bytes,
                result_bytes=cfg.result_bytes,
            )
        )
    return devices


def server_profile(cfg: ScenarioConfig) -> ServerProfile:
    return ServerProfile(capacity=cfg.capacity, alpha_server=cfg.alpha_server)


def resolve_gamma(cfg: ScenarioConfig, devices: list[DeviceProfile], srv: ServerProfile) -> float:
    if cfg.gamma is not None:
        return cfg.gamma
    return calibrate_gamma(devices, srv, cfg.price_target)


@dataclass(frozen=True)
class DeviceResult:
    device_id: str
    model: str
    compute: float
    bandwidth: float
    a: float
    g: float
    strategy: PartitionStrategy
    breakdown: CostBreakdown
    local_only: float  # T if the whole model ran on the device


@dataclass
class RunResult:
    """
    Outcome of one simulated run.

    prices holds the board price before the first round and after every
    round; tracked_prices holds the price the tracked device read before
    its own update in each round.
    """

    method: str
    device_count: int
    gamma: float
    devices: list[DeviceResult]
    prices: list[float] = field(default_factory=list)
    tracked_prices: list[float] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    converged: bool = True
    rounds: int = 0
    convergence_round: int | None = None

    def mean(self, attr: str) -> float:
        return float(np.mean([getattr(d.breakdown, attr) for d in self.devices]))

    @property
    def server_flop_share(self) -> float:
        offloaded = math.fsum(server_flops(d.strategy) for d in self.devices)
        total = math.fsum(total_flops(d.strategy.model) for d in self.devices)
        return offloaded / total

    @property
    def final_price(self) -> float:
        return self.prices[-1] if self.prices else 0.0

    def summary(self) -> dict:
        return {
            "method": self.method,
            "N": self.device_count,
            "mean_T": self.mean("t_total"),
            "mean_Ts": self.mean("t_server"),
            "mean_Tt": self.mean("t_net"),
            "mean_Tl": self.mean("t_local"),
            "converged": self.converged,
            "iters": self.rounds,
        }

    def devices_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "device_id": d.device_id,
                    "model": d.model,
                    "compute_gflops": d.compute / 1e9,
                    "bandwidth_mbps": d.bandwidth / BYTES_PER_MBIT,
                    "T_local_only": d.local_only,
                    "a": d.a,
                    "g": d.g,
                    "server_vertices": len(d.strategy.server_set),
                    "server_gflop": server_flops(d.strategy) / 1e9,
                    "T": d.breakdown.t_total,
                    "Tl": d.breakdown.t_local,
                    "Tt": d.breakdown.t_net,
                    "Ts": d.breakdown.t_server,
                    "L": d.breakdown.cost,
                }
                for d in self.devices
            ]
        )

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.trace)


def _device_result(dev: DeviceProfile, srv: ServerProfile, a: float, g_alloc: float,
                   strategy: PartitionStrategy, gamma: float) -> DeviceResult:
    return DeviceResult(
        device_id=dev.id,
        model=dev.model.name,
        compute=dev.compute,
        bandwidth=dev.bandwidth,
        a=a,
        g=g_alloc,
        strategy=strategy,
        breakdown=inference_cost(strategy, dev, srv, g_alloc, a, gamma),
        local_only=local_latency(all_local(dev.model), dev),
    )


def price_settled(prices: list[float], window: int, epsilon: float) -> bool:
    """True when the last window+1 prices stay within epsilon * max(A, 1) of each other."""
    if len(prices) <= window:
        return False
    recent = prices[-(window + 1):]
    return max(recent) - min(recent) < epsilon * max(prices[-1], 1.0)


def local_mode_settled(states: list[GameState], A: float, epsilon: float) -> bool:
    """
    True when every local-mode device has sniffed at a price within epsilon * max(A, 1) of A.

    A device that dropped to local mode and has not sniffed since may still
    want to bid at the current price, so the board is not settled yet.
    """
    tolerance = epsilon * max(A, 1.0)
    return all(
        s.sniff_price is not None and abs(s.sniff_price - A) < tolerance
        for s in states
        if s.a <= 0
    )


def _round_order(schedule: str, count: int, rng: np.random.Generator) -> list[int]:
    if schedule == "round-robin":
        return list(range(count))
    return [int(i) for i in rng.permutation(count)]


def run_dds(
    cfg: ScenarioConfig,
    devices: list[DeviceProfile] | None = None,
    progress: bool = False,
    verbose: bool = False,
) -> RunResult:
    """
    Play the budget game until the price settles or max_iters rounds pass.

    The price counts as settled once it has held still for a window of
    rounds and every local-mode device has sniffed at that price.

    Devices act one at a time within a round; each reads the board, runs
    its iteration and reports before the next one reads.

    Args:
        cfg: Scenario configuration
        devices: Fleet to use instead of sampling one from cfg
        progress: Show a tqdm bar over rounds
        verbose: Print one line per round

    Returns:
        RunResult whose device results are re-partitioned at the final price
    """
    devices = devices if devices is not None else sample_devices(cfg)
    srv = server_profile(cfg)
    gamma = resolve_gamma(cfg, devices, srv)
    game = cfg.game_config(gamma)

    board = PriceBoard(srv.capacity)
    a0 = cfg.a0_fraction * srv.capacity
    states = {}
    for dev in devices:
        states[dev.id] = GameState(a=a0)
        board.report(dev.id, a0)

    tracked = devices[cfg.tracked_device].id if cfg.tracked_device < len(devices) else devices[0].id
    schedule_rng = np.random.default_rng([cfg.seed, SCHEDULE_STREAM])
    result = RunResult(method="DDS", device_count=len(devices), gamma=gamma, devices=[], prices=[board.A])

    if verbose:
        print(f"DDS: {len(devices)} devices, S = {srv.capacity / 1e12:g} TFLOP/s, gamma = {gamma:.4g}")

    for t in tqdm(range(1, game.max_iters + 1), desc="Budget game", unit="round", disable=not progress):
        for idx in _round_order(cfg.schedule, len(devices), schedule_rng):
            dev = devices[idx]
            A_observed = board.A
            if dev.id == tracked:
                result.tracked_prices.append(A_observed)

            state, strategy, a = device_iteration(dev, states[dev.id], A_observed, srv, game)
            states[dev.id] = state
            A = board.report(dev.id, a)

            g_alloc = allocate(a, A) if strategy.server_set else 0.0
            breakdown = inference_cost(strategy, dev, srv, g_alloc, a, gamma)
            result.trace.append(
                {
                    "iteration": t,
                    "device_id": dev.id,
                    "a": a,
                    "g": g_alloc,
                    "A": A,
                    "T": breakdown.t_total,
                    "L": breakdown.cost,
                }
            )

        result.prices.append(board.A)
        result.rounds = t

        if verbose:
            local = sum(1 for s in states.values() if s.a == 0)
            print(f"Round {t}: A = {board.A:.6f}, {local}/{len(devices)} devices local")

        if price_settled(result.prices, game.window, game.epsilon) and local_mode_settled(
            list(states.values()), board.A, game.epsilon
        ):
            result.convergence_round = t
            break

    result.converged = result.convergence_round is not None
    if verbose and not result.converged:
        print(f"Warning: price did not settle within {game.max_iters} rounds (A = {board.A:.6f})")

    A_final = board.A
    for dev in devices:
        a = states[dev.id].a
        if a > 0:
            g_alloc = allocate(a, A_final)
            _, strategy = min_cut(build_latency_graph(dev.model, dev, g_alloc, srv.alpha_server))
        else:
            g_alloc, strategy = 0.0, all_local(dev.model)
        result.devices.append(_device_result(dev, srv, a, g_alloc, strategy, gamma))

    return result


def run_baseline(cfg: ScenarioConfig, method: str, devices: list[DeviceProfile] | None = None) -> RunResult:
    """
    Evaluate a baseline with the server split equally (S / N per device).

    Args:
        cfg: Scenario configuration
        method: "EO", "SO" or "DADS"
        devices: Fleet to use instead of sampling one from cfg
    """
    if method not in ("EO", "SO", "DADS"):
        raise ScenarioError(f"Unknown baseline '{method}'")

    devices = devices if devices is not None else sample_devices(cfg)
    srv = server_profile(cfg)
    share = srv.capacity / len(devices)

    results = []
    for dev in devices:
        if method == "EO":
            results.append(_device_result(dev, srv, 0.0, 0.0, all_local(dev.model), 0.0))
            continue
        if method == "SO":
            strategy = all_server(dev.model)
        else:
            _, strategy = min_cut(build_latency_graph(dev.model, dev, share, srv.alpha_server))
        results.append(_device_result(dev, srv, 0.0, share, strategy, 0.0))

    return RunResult(method=method, device_count=len(devices), gamma=0.0, devices=results)


def compare(cfg: ScenarioConfig, counts: list[int], progress: bool = False) -> tuple[pd.DataFrame, dict[int, RunResult]]:
    """
    Run every method for each fleet size.

    Returns:
        (summary frame with one row per (N, method), DDS runs keyed by N)
    """
    rows = []
    dds_runs = {}
    for n in tqdm(counts, desc="Fleet sizes", disable=not progress):
        scenario = replace(cfg, device_count=n, tracked_device=min(cfg.tracked_device, n - 1))
        devices = sample_devices(scenario)
        for method in METHODS:
            if method == "DDS":
                run = run_dds(scenario, devices)
                dds_runs[n] = run
            else:
                run = run_baseline(scenario, method, devices)
            rows.append(run.summary())
    return pd.DataFrame(rows), dds_runs


def convergence_study(
    cfg: ScenarioConfig,
    a0_fractions: list[float],
    progress: bool = False,
) -> dict[float, RunResult]:
    """Run the game from several initial budgets (fractions of S) on the same fleet."""
    devices = sample_devices(cfg)
    runs = {}
    for fraction in tqdm(a0_fractions, desc="Initial budgets", disable=not progress):
        runs[fraction] = run_dds(replace(cfg, a0_fraction=fraction), devices)
    return runs


def convergence_frame(runs: dict[float, RunResult]) -> pd.DataFrame:
    """Long-format price traces: one row per (a0_fraction, iteration)."""
    rows = []
    for fraction, run in runs.items():
        for t, observed in enumerate(run.tracked_prices, start=1):
            rows.append({"a0_fraction": fraction, "iteration": t, "A_observed": observed, "A": run.prices[t]})
    return pd.DataFrame(rows)
