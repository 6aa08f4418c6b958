#!/usr/bin/env python3
"""
Budget game for sharing edge-server compute among devices.

Each device bids a budget a_i in [0, S]. The bulletin board publishes the
price A = sum(a) / S, and the server grants

    g_i = a_i / max(A, 1)

so total allocation never exceeds S. A device with offloaded FLOPs c_i pays

    L_i(a_i) = T_i(a_i) + gamma * a_i

and each round it re-partitions its model at the allocation it expects,
then moves its budget along the momentum-smoothed gradient of L_i. Devices
with nothing worth offloading drop to local mode (a_i = 0) and periodically
probe the price with a grid search before bidding again.
"""

import math
import threading
from dataclasses import dataclass, replace

import numpy as np

from cost import CostBreakdown, DeviceProfile, ServerProfile, inference_cost, server_flops
from model_graph import total_flops
from partition import PartitionStrategy, all_local, build_latency_graph, min_cut

DEFAULT_LEARNING_RATE = 0.3
DEFAULT_MOMENTUM_DECAY = 0.5
DEFAULT_SNIFF_PERIOD = 10
DEFAULT_SNIFF_GRID = 16
DEFAULT_MAX_ITERS = 100
DEFAULT_EPSILON = 1e-3
DEFAULT_WINDOW = 5

# Smallest sniff candidate, as a fraction of S
SNIFF_FLOOR = 1e-4

# Budget steps never shrink a by more than this fraction of itself times the learning rate
GRADIENT_CLIP = 1.0

# Auto-calibrated gamma aims the equilibrium price near this value
DEFAULT_PRICE_TARGET = 16.0
# Auto-calibrated gamma stays at least this factor above the contraction bound
CONTRACTION_MARGIN = 2.0


class ZeroBudgetError(ValueError):
    """Gradient requested at a = 0, where the cost is not differentiable."""


@dataclass(frozen=True)
class GameConfig:
    gamma: float
    learning_rate: float = DEFAULT_LEARNING_RATE
    momentum_decay: float = DEFAULT_MOMENTUM_DECAY
    sniff_period: int = DEFAULT_SNIFF_PERIOD
    sniff_grid: int = DEFAULT_SNIFF_GRID
    max_iters: int = DEFAULT_MAX_ITERS
    epsilon: float = DEFAULT_EPSILON
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum_decay < 1:
            raise ValueError(f"momentum_decay must be in [0, 1), got {self.momentum_decay}")
        if self.sniff_period < 1:
            raise ValueError(f"sniff_period must be at least 1, got {self.sniff_period}")
        if self.sniff_grid < 2:
            raise ValueError(f"sniff_grid must be at least 2, got {self.sniff_grid}")
        if self.max_iters < 1 or self.window < 1:
            raise ValueError("max_iters and window must be at least 1")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class GameState:
    """Per-device game state carried from one round to the next."""

    a: float
    momentum: float = 0.0
    iteration: int = 0
    last_strategy: PartitionStrategy | None = None
    local_mode_rounds: int = 0  # rounds spent in local mode since entering it
    sniff_price: float | None = None  # price at the last sniff that kept the device local


class PriceBoard:
    """
    Bulletin board holding every device's latest budget.

    Reports and reads are serialized, so a device always sees the price
    including every report made before its read.
    """

    def __init__(self, capacity: float):
        if not capacity > 0:
            raise ValueError(f"Server capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._budgets: dict[str, float] = {}
        self._lock = threading.Lock()

    def report(self, device_id: str, a: float) -> float:
        """Record a device's budget and return the new price A."""
        if not (0 <= a <= self.capacity):
            raise ValueError(f"Budget {a} of '{device_id}' outside [0, {self.capacity}]")
        with self._lock:
            self._budgets[device_id] = a
            return math.fsum(self._budgets.values()) / self.capacity

    @property
    def A(self) -> float:
        with self._lock:
            return math.fsum(self._budgets.values()) / self.capacity

    def budgets(self) -> dict[str, float]:
        with self._lock:
            return dict(self._budgets)


def price(board: PriceBoard) -> tuple[float, float]:
    """(A, unit price); a unit of budget buys 1 / max(A, 1) FLOP/s."""
    A = board.A
    return A, max(A, 1.0)


def allocate(a: float, A: float) -> float:
    return a / max(A, 1.0)


def gradient(a: float, A: float, c: float, gamma: float, alpha_server: float = 1.0) -> float:
    """
    dL/da at a > 0 for a device offloading c FLOPs.

    Equals gamma - alpha_server * c * max(A, 1) / a^2.

    Raises:
        ZeroBudgetError: at a = 0; local-mode devices probe with resource_sniff
    """
    if a <= 0:
        raise ZeroBudgetError("Gradient undefined at a = 0; use resource_sniff in local mode")
    g = allocate(a, A)
    return gamma - alpha_server * c / (max(A, 1.0) * g * g)


def preconditioned_gradient(a: float, grad: float, gamma: float) -> float:
    """
    Scale a raw gradient into a budget step that is relative to a.

    Moving by learning_rate times this shrinks a by at most that fraction of
    itself, and grows it by at most the same fraction, whatever the units of
    the raw gradient.
    """
    return a * max(grad / gamma, -GRADIENT_CLIP)


def momentum_step(state: GameState, grad: float, cfg: GameConfig, capacity: float) -> tuple[float, float]:
    """
    One momentum update of the budget.

    Returns:
        (new budget clamped to [0, capacity], new momentum)
    """
    nu = cfg.momentum_decay * state.momentum + (1 - cfg.momentum_decay) * grad
    a = min(max(state.a - cfg.learning_rate * nu, 0.0), capacity)
    return a, nu


def closed_form_best_response(c: float, A: float, gamma: float, alpha_server: float = 1.0) -> float:
    """Stationary budget for fixed c and A: sqrt(alpha_server * c * max(A, 1) / gamma)."""
    return math.sqrt(alpha_server * c * max(A, 1.0) / gamma)


def contraction_holds(gamma: float, c_max: float, capacity: float) -> bool:
    """True when gamma > c_max / (4 S^2), which makes best responses a contraction."""
    return gamma > c_max / (4 * capacity * capacity)


def calibrate_gamma(
    devices: list[DeviceProfile],
    srv: ServerProfile,
    price_target: float = DEFAULT_PRICE_TARGET,
) -> float:
    """
    Pick gamma for a fleet from its models' FLOP totals.

    If every device offloaded its whole model and bid its best response,
    the price would settle at price_target. The result also stays
    CONTRACTION_MARGIN times above the contraction bound.

    Args:
        devices: Fleet to calibrate for
        srv: Server profile
        price_target: Desired equilibrium price

    Returns:
        gamma in seconds per budget unit
    """
    if not devices:
        raise ValueError("Cannot calibrate gamma for an empty fleet")
    if not price_target > 0:
        raise ValueError(f"price_target must be positive, got {price_target}")

    loads = [srv.alpha_server * total_flops(d.model) for d in devices]
    S = srv.capacity
    by_price = math.fsum(math.sqrt(c) for c in loads) ** 2 / (price_target * S * S)
    by_contraction = CONTRACTION_MARGIN * max(loads) / (4 * S * S)
    return max(by_price, by_contraction)


def evaluate_budget(
    dev: DeviceProfile,
    srv: ServerProfile,
    a: float,
    A: float,
    gamma: float,
) -> tuple[CostBreakdown, PartitionStrategy]:
    """Cost of bidding a at price A, with the partition re-optimized for the resulting allocation."""
    if a <= 0:
        strategy = all_local(dev.model)
        return inference_cost(strategy, dev, srv, 0.0, 0.0, gamma), strategy
    g_alloc = allocate(a, A)
    _, strategy = min_cut(build_latency_graph(dev.model, dev, g_alloc, srv.alpha_server))
    return inference_cost(strategy, dev, srv, g_alloc, a, gamma), strategy


def resource_sniff(dev: DeviceProfile, srv: ServerProfile, A: float, cfg: GameConfig) -> float:
    """
    Grid search for a local-mode device considering a return to bidding.

    Candidates are log-spaced over [SNIFF_FLOOR * S, S]. A is the price
    without this device; each candidate is evaluated at the price it would
    produce.

    Returns:
        The best candidate if it beats staying local, else 0.0
    """
    S = srv.capacity
    stay_local, _ = evaluate_budget(dev, srv, 0.0, A, cfg.gamma)

    candidates = np.geomspace(SNIFF_FLOOR * S, S, cfg.sniff_grid)
    costs = [evaluate_budget(dev, srv, float(a), A + a / S, cfg.gamma)[0].cost for a in candidates]
    best = int(np.argmin(costs))

    if costs[best] < stay_local.cost:
        return float(candidates[best])
    return 0.0


def offloading_pays(
    dev: DeviceProfile,
    srv: ServerProfile,
    strategy: PartitionStrategy,
    A: float,
    gamma: float,
) -> bool:
    """
    True when the strategy at its best budget for price A beats running locally.

    The best budget is the closed-form best response for the strategy's
    server FLOPs, clamped to the capacity; the cut is held fixed.
    """
    a_star = min(closed_form_best_response(server_flops(strategy), A, gamma, srv.alpha_server), srv.capacity)
    if a_star <= 0:
        return False
    best = inference_cost(strategy, dev, srv, allocate(a_star, A), a_star, gamma)
    local = inference_cost(all_local(dev.model), dev, srv, 0.0, 0.0, gamma)
    return best.cost < local.cost


def device_iteration(
    dev: DeviceProfile,
    state: GameState,
    A_observed: float,
    srv: ServerProfile,
    cfg: GameConfig,
) -> tuple[GameState, PartitionStrategy, float]:
    """
    One device round: partition, update the budget, report.

    A device in local mode runs everything locally and sniffs on its first
    local round and every sniff_period rounds after. A bidding device
    partitions at its expected allocation and drops to local mode when
    nothing lands on the server, or when even the best budget for its cut
    costs at least as much as running locally. Otherwise it takes a momentum
    step. Momentum resets whenever local mode is entered or left.

    The momentum step is fed preconditioned_gradient rather than the raw
    gradient, so learning_rate is a fraction of the current budget and not
    an absolute step in FLOP/s; the default learning_rate and momentum_decay
    are tuned for that scale.

    Args:
        dev: Device profile
        state: State from the previous round
        A_observed: Price read from the board, including this device's last bid
        srv: Server profile
        cfg: Game parameters

    Returns:
        (new state, strategy executed this round, budget to report)
    """
    if state.a <= 0:
        strategy = all_local(dev.model)
        a_new = 0.0
        sniffed = state.local_mode_rounds % cfg.sniff_period == 0
        if sniffed:
            a_new = resource_sniff(dev, srv, A_observed, cfg)
        if a_new > 0:
            new_state = GameState(a=a_new, iteration=state.iteration + 1, last_strategy=strategy)
        else:
            new_state = replace(
                state,
                iteration=state.iteration + 1,
                last_strategy=strategy,
                local_mode_rounds=state.local_mode_rounds + 1,
                sniff_price=A_observed if sniffed else state.sniff_price,
            )
        return new_state, strategy, a_new

    g_alloc = allocate(state.a, A_observed)
    _, strategy = min_cut(build_latency_graph(dev.model, dev, g_alloc, srv.alpha_server))
    c = server_flops(strategy)

    if c == 0 or not offloading_pays(dev, srv, strategy, A_observed, cfg.gamma):
        strategy = all_local(dev.model)
        new_state = GameState(a=0.0, iteration=state.iteration + 1, last_strategy=strategy, local_mode_rounds=1)
        return new_state, strategy, 0.0

    raw = gradient(state.a, A_observed, c, cfg.gamma, srv.alpha_server)
    a_new, nu = momentum_step(state, preconditioned_gradient(state.a, raw, cfg.gamma), cfg, srv.capacity)

    if a_new <= 0:
        strategy = all_local(dev.model)
        new_state = GameState(a=0.0, iteration=state.iteration + 1, last_strategy=strategy, local_mode_rounds=1)
        return new_state, strategy, 0.0

    new_state = GameState(a=a_new, momentum=nu, iteration=state.iteration + 1, last_strategy=strategy)
    return new_state, strategy, a_new
