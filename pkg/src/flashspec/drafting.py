"""Greedy token-tree construction driven by gain and cost estimates.

A tree is grown one node at a time from a frontier of drafted candidates.
Each candidate carries a reach estimate (the probability that verification
gets that far); each insertion is charged its marginal latency.  The builder
always picks the frontier node with the best reach-per-marginal-latency
ratio and stops as soon as even the best candidate cannot improve the tree's
average gain rate.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from .errors import ConfigError, ContractError
from .models import ProbModel, draft_candidates
from .tree import CandidateSet, ROOT_ID, TokenTree

import json


@dataclass(frozen=True)
class ReliabilityState:
    """Feedback-driven confidence factor for raw draft probabilities.

    ``value`` is an exponential moving average (decay ``beta``) of the
    per-cycle indicator "the target's token at the point where acceptance
    stopped was inside the drafted candidate set", clamped to
    [``floor``, 1].
    """

    value: float = 1.0
    beta: float = 0.9
    floor: float = 0.05

    def __post_init__(self) -> None:
        if not (0.0 < self.beta < 1.0):
            raise ConfigError("beta must lie in (0, 1)")
        if not (0.0 < self.floor <= 1.0):
            raise ConfigError("floor must lie in (0, 1]")
        if not (self.floor <= self.value <= 1.0):
            raise ConfigError("value must lie in [floor, 1]")


def update_reliability(rel: ReliabilityState, hit: bool) -> ReliabilityState:
    """EMA update from one verification outcome."""
    raw = rel.beta * rel.value + (1.0 - rel.beta) * (1.0 if hit else 0.0)
    return replace(rel, value=min(1.0, max(rel.floor, raw)))


def calibrate(p_draft: float, cand: CandidateSet, rel: ReliabilityState) -> float:
    """Map a raw draft probability to an estimated acceptance probability.

    Multiplicative down-weighting by the reliability factor, clamped to
    [0, 1]; strictly order-preserving within a candidate set.
    """
    return min(1.0, max(0.0, rel.value * p_draft))


class MovingAverage:
    """Fixed-window mean over runtime measurements, seeded with one value."""

    def __init__(self, window: int, initial: float) -> None:
        if window < 1:
            raise ConfigError("window must be >= 1")
        self._values: deque[float] = deque([float(initial)], maxlen=window)

    def add(self, value: float) -> None:
        self._values.append(float(value))

    @property
    def value(self) -> float:
        return sum(self._values) / len(self._values)


class LatencyProfile:
    """Verification-latency table indexed by tree shape (nodes, leaves).

    Exact hits return the stored running mean.  Misses return the nearest
    entry by L1 shape distance (ties prefer the smaller node count, then the
    smaller leaf count) multiplied by a conservative penalty.
    """

    def __init__(self, penalty: float = 1.1) -> None:
        if penalty < 1.0:
            raise ConfigError("penalty must be >= 1")
        self.penalty = float(penalty)
        self._entries: dict[tuple[int, int], tuple[int, float]] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> dict[tuple[int, int], float]:
        return {shape: mean for shape, (_, mean) in self._entries.items()}

    def set_entry(self, shape: tuple[int, int], ms: float) -> None:
        self._validate(shape, ms)
        self._entries[shape] = (1, float(ms))

    def observe(self, shape: tuple[int, int], ms: float) -> None:
        """Fold one measurement into the running mean for ``shape``."""
        self._validate(shape, ms)
        count, mean = self._entries.get(shape, (0, 0.0))
        count += 1
        mean += (ms - mean) / count
        self._entries[shape] = (count, mean)

    def lookup(self, shape: tuple[int, int]) -> float:
        nodes, leaves = shape
        if nodes < 1 or leaves < 1:
            raise ContractError(f"shape {shape} components must be >= 1")
        if not self._entries:
            raise ConfigError("latency profile is empty and has no offline seed")
        hit = self._entries.get(shape)
        if hit is not None:
            return hit[1]
        best_key = None
        best_dist = None
        for key in self._entries:
            dist = abs(key[0] - nodes) + abs(key[1] - leaves)
            if (
                best_dist is None
                or dist < best_dist
                or (dist == best_dist and key < best_key)
            ):
                best_dist = dist
                best_key = key
        return self._entries[best_key][1] * self.penalty

    @staticmethod
    def _validate(shape: tuple[int, int], ms: float) -> None:
        if shape[0] < 1 or shape[1] < 1:
            raise ContractError(f"shape {shape} components must be >= 1")
        if ms <= 0:
            raise ContractError("latency must be positive")

    @classmethod
    def affine(
        cls,
        c0: float,
        c_node: float,
        c_leaf: float,
        max_nodes: int,
        max_leaves: int,
        penalty: float = 1.1,
    ) -> "LatencyProfile":
        """Dense monotone seed: ms = c0 + c_node*nodes + c_leaf*leaves."""
        profile = cls(penalty=penalty)
        for nodes in range(1, max_nodes + 1):
            for leaves in range(1, min(nodes, max_leaves) + 1):
                profile.set_entry((nodes, leaves), c0 + c_node * nodes + c_leaf * leaves)
        return profile

    def save(self, path: str) -> None:
        rows = sorted(
            [nodes, leaves, mean]
            for (nodes, leaves), (_, mean) in self._entries.items()
        )
        with open(path, "w") as fh:
            json.dump({"penalty": self.penalty, "entries": rows}, fh, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "LatencyProfile":
        with open(path) as fh:
            payload = json.load(fh)
        profile = cls(penalty=payload.get("penalty", 1.1))
        for nodes, leaves, ms in payload["entries"]:
            profile.set_entry((int(nodes), int(leaves)), float(ms))
        return profile


@dataclass(frozen=True)
class DraftConfig:
    """Knobs for candidate generation and tree construction."""

    k: int = 3
    max_depth: int = 6
    b_min: float = 0.02            # expandability floor on reach
    r_min: float = 0.05
    beta: float = 0.9
    cost_floor_ms: float = 0.01    # marginal-cost floor; keeps ratios finite
    ma_window: int = 64
    draft_ms_seed: float = 2.0     # seeds the expansion-latency moving average
    max_nodes: int | None = None   # optional safety budget on non-root nodes

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.max_depth < 1:
            raise ConfigError("max_depth must be >= 1")
        if not (0.0 <= self.b_min < 1.0):
            raise ConfigError("b_min must lie in [0, 1)")
        if self.cost_floor_ms <= 0:
            raise ConfigError("cost_floor_ms must be > 0")

    def reliability(self) -> ReliabilityState:
        return ReliabilityState(value=1.0, beta=self.beta, floor=self.r_min)


@dataclass(frozen=True)
class FrontierEntry:
    """A drafted candidate whose parent is in the tree but which is not."""

    parent: int
    token: int
    p_draft: float
    reach: float
    depth: int


@dataclass(frozen=True)
class GainCostEstimate:
    gain: float
    draft_cost: float
    verify_cost: float
    marginal: dict[tuple[int, int], float] | None = None

    @property
    def cycle_cost(self) -> float:
        return self.draft_cost + self.verify_cost


@dataclass(frozen=True)
class StepRecord:
    """One insertion decision: the candidate ranking at that instant."""

    chosen: tuple[int, int]                          # (parent, token)
    chosen_ratio: float
    gain_before: float
    draft_cost_before: float
    verify_cost_before: float
    frontier: tuple[tuple[int, int, float, float, float], ...] | None
    # frontier rows: (parent, token, reach, marginal_cost, ratio)


@dataclass(frozen=True)
class StopRecord:
    reason: str                                      # frontier_empty | stop_rule | node_budget
    best_ratio: float | None
    gain: float
    cycle_cost: float
    frontier: tuple[tuple[int, int, float, float, float], ...] | None = None


@dataclass
class BuildResult:
    tree: TokenTree
    estimate: GainCostEstimate
    steps: list[StepRecord]
    stop: StopRecord
    expansion_counts: list[int]
    candidate_sets: dict[int, CandidateSet] = field(default_factory=dict)


def estimate_gain(tree: TokenTree) -> float:
    """Expected tokens per cycle: one fallback plus summed reach."""
    total = 1.0
    for nid in tree.ids():
        if nid != ROOT_ID:
            total += tree.node(nid).reach
    return total


def estimate_verify_cost(profile: LatencyProfile, shape: tuple[int, int]) -> float:
    return profile.lookup(shape)


def is_expandable(entry: FrontierEntry, cfg: DraftConfig) -> bool:
    """Whether inserting this node would trigger a further draft expansion."""
    return entry.depth < cfg.max_depth and entry.reach >= cfg.b_min


def shape_after_insert(tree: TokenTree, entry: FrontierEntry) -> tuple[int, int]:
    nodes, leaves = tree.shape
    if tree.children(entry.parent):
        leaves += 1
    # else: the parent was a leaf and the child replaces it; leaves unchanged
    return nodes + 1, leaves


def marginal_cost(
    entry: FrontierEntry,
    tree: TokenTree,
    profile: LatencyProfile,
    draft_ma: MovingAverage,
    cfg: DraftConfig,
) -> float:
    """Estimated cycle-latency increase from inserting one frontier node."""
    before = profile.lookup(tree.shape)
    after = profile.lookup(shape_after_insert(tree, entry))
    delta = after - before
    if is_expandable(entry, cfg):
        delta += draft_ma.value
    return max(delta, cfg.cost_floor_ms)


def _selection_key(item: tuple[FrontierEntry, float, float]) -> tuple:
    entry, _, ratio = item
    # Best ratio first; ties prefer higher reach, then smaller token, then
    # smaller parent handle (fully deterministic ordering).
    return (-ratio, -entry.reach, entry.token, entry.parent)


DraftTimer = Callable[[int], float]


def build_tree(
    context: Sequence[int],
    draft: ProbModel,
    cfg: DraftConfig,
    rel: ReliabilityState,
    profile: LatencyProfile,
    draft_timer: DraftTimer | None = None,
    record_frontier: bool = False,
    add_shadows: bool = True,
) -> BuildResult:
    """Grow a token tree greedily by reach-per-marginal-latency.

    Every insertion maximizes reach/marginal-cost over the frontier at its
    instant; construction ends when the frontier empties, when the optional
    node budget is hit, or when the best remaining candidate cannot improve
    the tree's average gain rate (gain / cycle latency).

    ``draft_timer(count)`` prices one expansion step; defaults to the
    configured seed latency, keeping construction deterministic.
    """
    if not context:
        raise ContractError("context must be non-empty")
    timer = draft_timer or (lambda count: cfg.draft_ms_seed * count)

    tree = TokenTree(root_token=int(context[-1]))
    reaches = {ROOT_ID: 1.0}
    frontier: list[FrontierEntry] = []
    candidate_sets: dict[int, CandidateSet] = {}
    expansion_counts: list[int] = []
    steps: list[StepRecord] = []
    draft_ma = MovingAverage(cfg.ma_window, cfg.draft_ms_seed)
    gain = 1.0
    draft_cost = 0.0

    def expand(node_id: int) -> None:
        nonlocal draft_cost
        prefix = list(context) + tree.path_tokens(node_id)
        cand = draft_candidates(draft, prefix, cfg.k)
        cand = CandidateSet(cand.entries, parent=node_id)
        candidate_sets[node_id] = cand
        elapsed = timer(1)
        draft_ma.add(elapsed)
        draft_cost += elapsed
        expansion_counts.append(1)
        depth = tree.node(node_id).depth + 1
        for token, p in cand.entries:
            reach = reaches[node_id] * calibrate(p, cand, rel)
            frontier.append(FrontierEntry(node_id, token, p, reach, depth))

    expand(ROOT_ID)
    stop: StopRecord | None = None

    while frontier:
        verify_cost = profile.lookup(tree.shape)
        cycle_cost = draft_cost + verify_cost
        scored = [
            (e, mc, e.reach / mc)
            for e in frontier
            for mc in (marginal_cost(e, tree, profile, draft_ma, cfg),)
        ]
        scored.sort(key=_selection_key)
        best, best_mc, best_ratio = scored[0]

        if best_ratio <= gain / cycle_cost:
            stop = StopRecord(
                "stop_rule",
                best_ratio,
                gain,
                cycle_cost,
                frontier=tuple(
                    (e.parent, e.token, e.reach, mc, ratio)
                    for e, mc, ratio in scored
                )
                if record_frontier
                else None,
            )
            break

        steps.append(
            StepRecord(
                chosen=(best.parent, best.token),
                chosen_ratio=best_ratio,
                gain_before=gain,
                draft_cost_before=draft_cost,
                verify_cost_before=verify_cost,
                frontier=tuple(
                    (e.parent, e.token, e.reach, mc, ratio)
                    for e, mc, ratio in scored
                )
                if record_frontier
                else None,
            )
        )
        node_id = tree.insert(best.parent, best.token, best.reach)
        reaches[node_id] = best.reach
        frontier.remove(best)
        gain += best.reach
        if is_expandable(best, cfg):
            expand(node_id)
        if cfg.max_nodes is not None and tree.node_count - 1 >= cfg.max_nodes:
            stop = StopRecord(
                "node_budget", None, gain, draft_cost + profile.lookup(tree.shape)
            )
            break

    if stop is None:
        stop = StopRecord(
            "frontier_empty", None, gain, draft_cost + profile.lookup(tree.shape)
        )

    if add_shadows:
        _attach_shadows(tree, frontier)

    estimate = GainCostEstimate(
        gain=gain,
        draft_cost=draft_cost,
        verify_cost=profile.lookup(tree.shape),
    )
    return BuildResult(tree, estimate, steps, stop, expansion_counts, candidate_sets)


def _attach_shadows(tree: TokenTree, frontier: list[FrontierEntry]) -> None:
    """Flag leftover candidates under parents that kept at least one child.

    These shadow nodes complete each parent's candidate set for pruning-score
    normalization; they never enter verification.
    """
    for entry in frontier:
        if tree.children(entry.parent):
            tree.insert(entry.parent, entry.token, entry.reach, shadow=True)
