"""Layer-to-device assignment under memory constraints.

An affinity matrix ranks devices per layer by compute speed; the exact
solver runs depth-first branch-and-bound over assignments with memory and
lower-bound pruning, and a greedy fallback walks layers in order taking the
best-affinity device that still has room. The latency model charges compute
per layer plus a transfer term at every boundary where the device changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EXACT_MAX_LAYERS = 20
EXACT_MAX_DEVICES = 3


@dataclass(frozen=True)
class DeviceSpec:
    id: str
    memory_bytes: int
    throughput_flops: float
    bandwidth_bytes: float

    def __post_init__(self):
        if self.memory_bytes < 0:
            raise ValueError("memory must be >= 0")
        if self.throughput_flops <= 0:
            raise ValueError("throughput must be positive")
        if self.bandwidth_bytes <= 0:
            raise ValueError("bandwidth must be positive")


@dataclass(frozen=True)
class LayerProfile:
    id: str
    order: int
    flops: float
    weight_bytes: int
    activation_bytes: int

    def __post_init__(self):
        if self.flops < 0 or self.weight_bytes < 0 or self.activation_bytes < 0:
            raise ValueError("layer profile fields must be non-negative")


@dataclass(frozen=True)
class PlacementPlan:
    """Layer -> device assignment with feasibility and predicted latency."""

    assignment: dict[str, str]
    feasible: bool
    latency: float
    memory_per_device: dict[str, int]
    mode: str  # "exact" | "greedy"


class InfeasiblePlacement(RuntimeError):
    """Raised by callers that cannot proceed without a feasible plan."""


def _ordered(layers) -> list[LayerProfile]:
    ordered = sorted(layers, key=lambda l: l.order)
    if [l.order for l in ordered] != list(range(len(ordered))):
        raise ValueError("layer order indices must be contiguous from 0")
    return ordered


def build_affinity(layers, devices) -> np.ndarray:
    """Per-layer min-max scaled speed scores in [0, 1]; higher is better.

    A layer's fastest device scores 1.0 and its slowest 0.0; with a single
    candidate (or equal times) every score is 1.0.
    """
    layers = _ordered(layers)
    if not layers or not devices:
        raise ValueError("need at least one layer and one device")
    times = np.array([
        [layer.flops / dev.throughput_flops for dev in devices] for layer in layers
    ])
    out = np.ones_like(times)
    spread = times.max(axis=1) - times.min(axis=1)
    for i in range(len(layers)):
        if spread[i] > 0:
            out[i] = (times[i].max() - times[i]) / spread[i]
    return out


def estimate_latency(assignment: list[int], layers, devices) -> float:
    """Seconds per token: compute time plus boundary-crossing transfers.

    assignment[i] is the device index for the layer with order index i. A
    boundary between consecutive layers on different devices costs the
    earlier layer's activation bytes over the slower of the two links.
    """
    layers = _ordered(layers)
    if len(assignment) != len(layers):
        raise ValueError("assignment must cover every layer")
    total = 0.0
    for i, layer in enumerate(layers):
        total += layer.flops / devices[assignment[i]].throughput_flops
    for i in range(len(layers) - 1):
        a, b = assignment[i], assignment[i + 1]
        if a != b:
            link = min(devices[a].bandwidth_bytes, devices[b].bandwidth_bytes)
            total += layers[i].activation_bytes / link
    return total


def _plan(assignment: list[int] | None, layers, devices, mode: str) -> PlacementPlan:
    if assignment is None:
        return PlacementPlan(
            assignment={}, feasible=False, latency=math.inf,
            memory_per_device={d.id: 0 for d in devices}, mode=mode,
        )
    layers = _ordered(layers)
    usage = {d.id: 0 for d in devices}
    for i, layer in enumerate(layers):
        usage[devices[assignment[i]].id] += layer.weight_bytes
    return PlacementPlan(
        assignment={layers[i].id: devices[assignment[i]].id for i in range(len(layers))},
        feasible=True,
        latency=estimate_latency(assignment, layers, devices),
        memory_per_device=usage,
        mode=mode,
    )


def _solve_exact(layers, devices) -> list[int] | None:
    """Branch-and-bound over per-layer device choices.

    Children are explored best-affinity first; a node is pruned when its
    accumulated latency plus the sum of remaining per-layer minimum compute
    times cannot beat the incumbent. Equal-latency plans resolve to the
    lexicographically smallest device-index tuple, i.e. lowest device id
    first.
    """
    n, m = len(layers), len(devices)
    affinity = build_affinity(layers, devices)
    compute = np.array([
        [layer.flops / dev.throughput_flops for dev in devices] for layer in layers
    ])
    min_remaining = np.zeros(n + 1)
    for i in range(n - 1, -1, -1):
        min_remaining[i] = min_remaining[i + 1] + compute[i].min()

    child_order = [
        sorted(range(m), key=lambda d: (-affinity[i][d], d)) for i in range(n)
    ]

    best_cost = math.inf
    best_assign: list[int] | None = None
    assign = [0] * n
    remaining = [d.memory_bytes for d in devices]

    def recurse(i: int, cost: float):
        nonlocal best_cost, best_assign
        if cost + min_remaining[i] > best_cost:
            return
        if i == n:
            candidate = list(assign)
            if cost < best_cost or (cost == best_cost and
                                    (best_assign is None or candidate < best_assign)):
                best_cost = cost
                best_assign = candidate
            return
        layer = layers[i]
        for d in child_order[i]:
            if layer.weight_bytes > remaining[d]:
                continue
            step = compute[i][d]
            if i > 0 and assign[i - 1] != d:
                link = min(devices[assign[i - 1]].bandwidth_bytes, devices[d].bandwidth_bytes)
                step += layers[i - 1].activation_bytes / link
            assign[i] = d
            remaining[d] -= layer.weight_bytes
            recurse(i + 1, cost + step)
            remaining[d] += layer.weight_bytes

    recurse(0, 0.0)
    return best_assign


def _solve_greedy(layers, devices, affinity) -> list[int] | None:
    assign = []
    remaining = [d.memory_bytes for d in devices]
    for i, layer in enumerate(layers):
        candidates = [d for d in range(len(devices)) if layer.weight_bytes <= remaining[d]]
        if not candidates:
            return None
        best = min(candidates, key=lambda d: (-affinity[i][d], d))
        assign.append(best)
        remaining[best] -= layer.weight_bytes
    return assign


def solve_placement(layers, devices, mode: str = "auto") -> PlacementPlan:
    """Assign every layer to a device, minimizing predicted latency.

    mode "auto" runs the exact solver on desk-scale instances (at most
    EXACT_MAX_LAYERS layers or EXACT_MAX_DEVICES devices) and greedy
    otherwise. Infeasible instances yield a plan with feasible=False, never
    a silent partial assignment.
    """
    layers = _ordered(layers)
    # Index order follows id order so index tie-breaks realize the
    # documented lowest-device-id rule.
    devices = sorted(devices, key=lambda d: d.id)
    if not layers or not devices:
        raise ValueError("need at least one layer and one device")
    if mode not in ("auto", "exact", "greedy"):
        raise ValueError(f"unknown mode {mode!r}")

    total_weights = sum(l.weight_bytes for l in layers)
    if total_weights > sum(d.memory_bytes for d in devices):
        return _plan(None, layers, devices, mode if mode != "auto" else "exact")

    if mode == "auto":
        mode = (
            "exact"
            if len(layers) <= EXACT_MAX_LAYERS or len(devices) <= EXACT_MAX_DEVICES
            else "greedy"
        )
    if mode == "exact":
        return _plan(_solve_exact(layers, devices), layers, devices, "exact")
    affinity = build_affinity(layers, devices)
    return _plan(_solve_greedy(layers, devices, affinity), layers, devices, "greedy")
