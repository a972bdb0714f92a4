"""Activation bit-width allocation under a FLOPs-weighted average-bit budget.

The discretized dynamic program scales each layer's FLOPs share to integer
cost units (resolution beta), then minimizes the summed loss gaps over
states [layer x accumulated cost], recovering the assignment by backtracking.
Layers with ``fixed_bits`` set are excluded from the optimization and from
its budget; they re-enter only in the whole-network average.

A brute-force enumerator over the continuous budget serves as the oracle.
Ties are broken toward the lower bit-width, then the lower layer index, so
outputs are deterministic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError, SizeError, ValidationError
from .tensorio import SensitivityTable

DEFAULT_BIT_SET = (1, 2, 3, 4)
BRUTE_FORCE_MAX_LAYERS = 12


@dataclass
class AllocationProblem:
    table: SensitivityTable
    target_avg_bits: float
    beta: int = 1000
    bit_set: tuple[int, ...] = DEFAULT_BIT_SET

    def __post_init__(self):
        self.bit_set = tuple(sorted(self.bit_set))
        if self.beta < 10:
            raise ValidationError(f"beta must be >= 10, got {self.beta}")
        if not self.bit_set:
            raise ValidationError("bit_set must be nonempty")
        missing = [b for b in self.bit_set if b not in self.table.bits]
        if missing:
            raise ValidationError(f"sensitivity table lacks columns for bits {missing}")


@dataclass
class Allocation:
    """Chosen widths per layer plus the budget bookkeeping.

    ``achieved_avg_bits`` is the FLOPs-weighted average over the optimized
    (non-fixed) layers; ``predicted_loss`` sums their loss gaps.
    """

    bits_per_layer: dict[str, int]
    achieved_avg_bits: float
    predicted_loss: float
    target_avg_bits: float = 0.0
    beta: int = 0


def _split_layers(table: SensitivityTable):
    dp = [i for i, l in enumerate(table.layers) if l.fixed_bits is None]
    fixed = [i for i, l in enumerate(table.layers) if l.fixed_bits is not None]
    return dp, fixed


def _gap(table: SensitivityTable, layer_idx: int, bits: int) -> float:
    return float(table.delta_loss[layer_idx, table.bits.index(bits)])


def _finish(problem: AllocationProblem, chosen: dict[int, int]) -> Allocation:
    table = problem.table
    dp_idx, fixed_idx = _split_layers(table)
    w_dp = sum(table.layers[i].flops_weight for i in dp_idx)
    achieved = (
        sum(table.layers[i].flops_weight * chosen[i] for i in dp_idx) / w_dp if w_dp else 0.0
    )
    loss = sum(_gap(table, i, chosen[i]) for i in dp_idx)
    bits_per_layer = {table.layers[i].name: chosen[i] for i in dp_idx}
    for i in fixed_idx:
        bits_per_layer[table.layers[i].name] = table.layers[i].fixed_bits
    return Allocation(
        bits_per_layer=bits_per_layer,
        achieved_avg_bits=achieved,
        predicted_loss=loss,
        target_avg_bits=problem.target_avg_bits,
        beta=problem.beta,
    )


def dp_allocate(problem: AllocationProblem) -> Allocation:
    """Minimize the summed loss gaps under the discretized budget.

    Layer costs are dw_l = floor(beta * w_l / W_dp) units and the budget is
    B = floor(beta * target) units; DP[l][w] is the minimal cumulative loss
    after the first l layers at accumulated cost w, with DP[0][0] = 0. The
    answer is read at argmin over w <= B and recovered by backtracking.
    """
    table = problem.table
    dp_idx, _ = _split_layers(table)
    if not dp_idx:
        return _finish(problem, {})
    beta = problem.beta
    bit_set = problem.bit_set
    w_dp = sum(table.layers[i].flops_weight for i in dp_idx)
    if w_dp <= 0:
        raise ValidationError("total FLOPs weight of optimized layers must be positive")
    dw = [int(math.floor(beta * table.layers[i].flops_weight / w_dp)) for i in dp_idx]
    budget = int(math.floor(beta * problem.target_avg_bits))
    min_cost = sum(d * bit_set[0] for d in dw)
    if problem.target_avg_bits < bit_set[0] or min_cost > budget:
        raise InfeasibleError(
            f"budget {problem.target_avg_bits} infeasible; minimum achievable "
            f"average is {bit_set[0]} bits",
            min_achievable=float(bit_set[0]),
        )

    n = len(dp_idx)
    cost = np.full((n + 1, budget + 1), np.inf)
    cost[0, 0] = 0.0
    choice = np.full((n + 1, budget + 1), -1, dtype=np.int64)  # bit index taken
    prev_w = np.full((n + 1, budget + 1), -1, dtype=np.int64)
    for step, layer_idx in enumerate(dp_idx, start=1):
        d = dw[step - 1]
        for k, b in enumerate(bit_set):  # ascending: strict < keeps the lower width
            add = d * b
            if add > budget:
                continue
            cand = cost[step - 1, : budget + 1 - add] + _gap(table, layer_idx, b)
            region = cost[step, add:]
            better = cand < region
            region[better] = cand[better]
            choice[step, add:][better] = k
            prev_w[step, add:][better] = np.nonzero(better)[0]
    final = cost[n]
    if not np.isfinite(final).any():
        raise InfeasibleError(
            "no assignment fits the discretized budget",
            min_achievable=float(bit_set[0]),
        )
    w_star = int(np.argmin(final))  # first minimum: lowest accumulated cost wins ties

    chosen: dict[int, int] = {}
    w = w_star
    for step in range(n, 0, -1):
        k = int(choice[step, w])
        chosen[dp_idx[step - 1]] = bit_set[k]
        w = int(prev_w[step, w])
    return _finish(problem, chosen)


def brute_force_allocate(problem: AllocationProblem) -> Allocation:
    """Exact optimum of the continuous-budget problem by full enumeration.

    The test oracle for ``dp_allocate``: all |bit_set|^L assignments are
    scored against the undiscretized constraint
    sum(w_l * b_l) / W_dp <= target. Bounded to 12 optimized layers.
    """
    table = problem.table
    dp_idx, _ = _split_layers(table)
    if len(dp_idx) > BRUTE_FORCE_MAX_LAYERS:
        raise SizeError(
            f"{len(dp_idx)} layers exceed the enumeration bound of {BRUTE_FORCE_MAX_LAYERS}"
        )
    if not dp_idx:
        return _finish(problem, {})
    weights = [table.layers[i].flops_weight for i in dp_idx]
    w_dp = sum(weights)
    if w_dp <= 0:
        raise ValidationError("total FLOPs weight of optimized layers must be positive")
    budget = problem.target_avg_bits * w_dp * (1.0 + 1e-12)
    best_loss, best = np.inf, None
    # Lexicographic order over ascending bit_set: the first strict minimum
    # is the tie-break toward lower widths and lower layer indices.
    for assign in itertools.product(problem.bit_set, repeat=len(dp_idx)):
        if sum(w * b for w, b in zip(weights, assign)) > budget:
            continue
        loss = sum(_gap(table, i, b) for i, b in zip(dp_idx, assign))
        if loss < best_loss:
            best_loss, best = loss, assign
    if best is None:
        raise InfeasibleError(
            f"budget {problem.target_avg_bits} infeasible; minimum achievable "
            f"average is {problem.bit_set[0]} bits",
            min_achievable=float(problem.bit_set[0]),
        )
    return _finish(problem, dict(zip(dp_idx, best)))


def achieved_average(alloc: Allocation, table: SensitivityTable) -> float:
    """FLOPs-weighted mean width over every layer, fixed ones included."""
    total_w, total = 0.0, 0.0
    for layer in table.layers:
        if layer.name not in alloc.bits_per_layer:
            raise ValidationError(f"allocation is missing layer {layer.name!r}")
        total_w += layer.flops_weight
        total += layer.flops_weight * alloc.bits_per_layer[layer.name]
    if total_w == 0:
        raise ValidationError("total FLOPs weight is zero")
    return total / total_w
