"""Two-stage importance sampling of joint scene modes from factor marginals.

Stage 1 scores the categorical factors (one lane factor per agent, one
interaction factor per pair) and keeps the top few; stage 2 enumerates the
product of the kept factors' plausible modes, fixes everything else to its
argmax, and ranks candidates by the sum of factor log-probabilities.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import distance_to_lane
from .modes import HomotopyClass, SceneMode
from .scene import LaneGraph, LaneRelation, Scene, iter_pairs, num_pairs

NORMALIZATION_TOL = 1e-5
PROB_FLOOR = 1e-6
MAX_CANDIDATES = 10_000


class InsufficientModes(RuntimeError):
    """Fewer distinct joint modes exist than were requested."""


@dataclass
class MarginalDist:
    """Per-factor log-probabilities: lanes [N, M+1] (column 0 = null), pairs [P, 3]."""

    a2l_logp: np.ndarray
    a2a_logp: np.ndarray

    def __post_init__(self):
        self.a2l_logp = np.asarray(self.a2l_logp, dtype=np.float64)
        self.a2a_logp = np.asarray(self.a2a_logp, dtype=np.float64)
        if self.a2l_logp.ndim != 2:
            raise ValueError("a2l_logp must be [N, M+1]")
        if self.a2a_logp.ndim != 2 or self.a2a_logp.shape[1] != 3:
            raise ValueError("a2a_logp must be [P, 3]")
        if self.a2a_logp.shape[0] != num_pairs(self.a2l_logp.shape[0]):
            raise ValueError("a2a row count must match the number of unordered agent pairs")
        for rows in (self.a2l_logp, self.a2a_logp):
            if rows.size:
                lse = _logsumexp(rows)
                if np.max(np.abs(lse)) > NORMALIZATION_TOL:
                    raise ValueError("marginal rows must be normalized (log-sum-exp 0)")

    @property
    def num_agents(self) -> int:
        return self.a2l_logp.shape[0]

    @property
    def num_lanes(self) -> int:
        return self.a2l_logp.shape[1] - 1

    def factor_logp(self, factor_id: int) -> np.ndarray:
        n = self.num_agents
        if factor_id < n:
            return self.a2l_logp[factor_id]
        return self.a2a_logp[factor_id - n]

    def num_factors(self) -> int:
        return self.num_agents + self.a2a_logp.shape[0]

    def copy(self) -> "MarginalDist":
        return MarginalDist(self.a2l_logp.copy(), self.a2a_logp.copy())


def _logsumexp(rows: np.ndarray) -> np.ndarray:
    m = rows.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(rows - m).sum(axis=-1, keepdims=True))).squeeze(-1)


@dataclass(frozen=True)
class FactorScore:
    factor_id: int  # a2l factors are 0..N-1, a2a factors follow in pair order
    kind: str  # "a2l" | "a2a"
    index: int  # agent index or pair index
    score: float


@dataclass
class ScoreWeights:
    w_dist: float = 1.0
    w_lane: float = 1.0
    w_entropy: float = 1.0
    sigma_dist: float = 20.0
    sigma_lane: float = 5.0


@dataclass
class SMSampleSet:
    """Distinct joint-mode samples with their approximate (proposal) log-probs."""

    samples: list[SceneMode]
    approx_logp: np.ndarray
    gt_index: Optional[int] = None

    def __post_init__(self):
        self.approx_logp = np.asarray(self.approx_logp, dtype=np.float64)
        keys = [s.key() for s in self.samples]
        if len(set(keys)) != len(keys):
            raise ValueError("scene-mode samples must be distinct")
        if self.gt_index is not None and not (0 <= self.gt_index < len(self.samples)):
            raise ValueError("gt_index out of range")

    def __len__(self) -> int:
        return len(self.samples)


def _normalized_entropy(logp: np.ndarray) -> float:
    p = np.exp(logp)
    h = -np.sum(p * np.where(p > 0, logp, 0.0))
    return float(h / math.log(len(logp))) if len(logp) > 1 else 0.0


def score_factors(
    marginals: MarginalDist,
    scene: Scene,
    weights: Optional[ScoreWeights] = None,
) -> list[FactorScore]:
    """Importance scores for every factor, sorted high to low (ties by factor id)."""
    w = weights or ScoreWeights()
    n = scene.num_agents
    ego_xy = scene.ego.current_pose.xy
    agent_xy = [a.current_pose.xy for a in scene.agents]
    d_ego = [float(np.hypot(*(xy - ego_xy))) for xy in agent_xy]
    if scene.num_lanes:
        d_lane = [min(distance_to_lane(xy, lane) for lane in scene.lane_graph.lanes) for xy in agent_xy]
    else:
        d_lane = [math.inf] * n

    scores: list[FactorScore] = []
    for i in range(n):
        s = (
            w.w_dist * math.exp(-d_ego[i] / w.sigma_dist)
            + w.w_lane * math.exp(-d_lane[i] / w.sigma_lane)
            + w.w_entropy * _normalized_entropy(marginals.a2l_logp[i])
        )
        scores.append(FactorScore(i, "a2l", i, s))
    for p, (i, j) in enumerate(iter_pairs(n)):
        s = (
            w.w_dist * math.exp(-min(d_ego[i], d_ego[j]) / w.sigma_dist)
            + w.w_entropy * _normalized_entropy(marginals.a2a_logp[p])
        )
        scores.append(FactorScore(n + p, "a2a", p, s))
    scores.sort(key=lambda f: (-f.score, f.factor_id))
    return scores


def diverse_lane_augment(
    marginals: MarginalDist,
    gtsm: SceneMode,
    lane_graph: LaneGraph,
) -> MarginalDist:
    """Copy of the marginals where each agent's GT-adjacent lanes get the GT lane's mass.

    Only the sampling proposal uses the result; the input is never mutated.
    """
    a2l = marginals.a2l_logp.copy()
    for i, lane_id in enumerate(gtsm.a2l):
        if lane_id == 0:
            continue
        gt_logp = a2l[i, lane_id]
        neighbors = lane_graph.neighbors(lane_id, LaneRelation.LEFT_ADJ) + lane_graph.neighbors(
            lane_id, LaneRelation.RIGHT_ADJ
        )
        for nb in neighbors:
            a2l[i, nb] = gt_logp
    a2l = a2l - _logsumexp(a2l)[:, None]
    return MarginalDist(a2l, marginals.a2a_logp.copy())


def _mode_key(a2l: tuple[int, ...], a2a: tuple[int, ...]) -> tuple:
    return (a2l, a2a)


def _assemble(base_a2l: np.ndarray, base_a2a: np.ndarray, factors, choice) -> tuple[tuple, tuple]:
    a2l = base_a2l.copy()
    a2a = base_a2a.copy()
    for f, mode in zip(factors, choice):
        if f.kind == "a2l":
            a2l[f.index] = mode
        else:
            a2a[f.index] = mode
    return tuple(int(v) for v in a2l), tuple(int(v) for v in a2a)


def _top_product(choice_lists: list[list[tuple[float, int]]], limit: int):
    """Best-first enumeration of index tuples over per-factor (logp, mode) lists.

    Lists are sorted by descending logp; yields at most ``limit`` tuples in
    non-increasing total-logp order.
    """
    k = len(choice_lists)
    if k == 0:
        yield ()
        return
    start = (0,) * k
    best = sum(lst[0][0] for lst in choice_lists)
    heap = [(-best, start)]
    seen = {start}
    count = 0
    while heap and count < limit:
        neg, idx = heapq.heappop(heap)
        yield idx
        count += 1
        for d in range(k):
            if idx[d] + 1 < len(choice_lists[d]):
                nxt = idx[:d] + (idx[d] + 1,) + idx[d + 1 :]
                if nxt not in seen:
                    seen.add(nxt)
                    score = -neg - choice_lists[d][idx[d]][0] + choice_lists[d][idx[d] + 1][0]
                    heapq.heappush(heap, (-score, nxt))


def sample_scene_modes(
    marginals: MarginalDist,
    scene: Scene,
    k: int,
    n_factors: int = 4,
    gtsm: Optional[SceneMode] = None,
    dls: bool = False,
    weights: Optional[ScoreWeights] = None,
    prob_floor: float = PROB_FLOOR,
    max_candidates: int = MAX_CANDIDATES,
) -> SMSampleSet:
    """Top-k distinct joint modes under the product-of-marginals proposal.

    With ``gtsm`` given (training), the ground-truth mode is forced into the
    set, replacing the worst sample if needed. ``dls=True`` widens the lane
    proposal around the GT lane before sampling; it never touches the input
    marginals.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    total_factors = marginals.num_factors()
    if not 1 <= n_factors <= total_factors:
        raise ValueError(f"n_factors must be in 1..{total_factors}")
    if dls:
        if gtsm is None:
            raise ValueError("diverse lane sampling needs the ground-truth mode")
        proposal = diverse_lane_augment(marginals, gtsm, scene.lane_graph)
    else:
        proposal = marginals

    ranked = score_factors(proposal, scene, weights)
    selected = ranked[:n_factors]
    selected.sort(key=lambda f: f.factor_id)

    base_a2l = np.argmax(proposal.a2l_logp, axis=1) if proposal.a2l_logp.size else np.zeros(marginals.num_agents, dtype=int)
    base_a2a = (
        np.argmax(proposal.a2a_logp, axis=1)
        if proposal.a2a_logp.size
        else np.zeros(0, dtype=int)
    )

    log_floor = math.log(prob_floor)
    choice_lists: list[list[tuple[float, int]]] = []
    for f in selected:
        logp = proposal.factor_logp(f.factor_id)
        choices = [(float(logp[m]), m) for m in range(len(logp)) if logp[m] >= log_floor]
        if not choices:
            choices = [(float(logp[np.argmax(logp)]), int(np.argmax(logp)))]
        choices.sort(key=lambda c: (-c[0], c[1]))
        choice_lists.append(choices)

    fixed_logp = 0.0
    selected_ids = {f.factor_id for f in selected}
    for fid in range(total_factors):
        if fid not in selected_ids:
            fixed_logp += float(np.max(proposal.factor_logp(fid)))

    total_products = 1
    for lst in choice_lists:
        total_products *= len(lst)

    candidates: list[tuple[float, tuple, tuple]] = []
    if total_products <= max_candidates:
        index_iter = itertools.product(*[range(len(lst)) for lst in choice_lists])
    else:
        index_iter = _top_product(choice_lists, max_candidates)
    for idx in index_iter:
        logp = fixed_logp + sum(choice_lists[d][i][0] for d, i in enumerate(idx))
        choice = tuple(choice_lists[d][i][1] for d, i in enumerate(idx))
        a2l, a2a = _assemble(base_a2l, base_a2a, selected, choice)
        candidates.append((logp, a2l, a2a))

    candidates.sort(key=lambda c: (-c[0], _mode_key(c[1], c[2])))
    if len(candidates) < k:
        raise InsufficientModes(f"only {len(candidates)} distinct modes available, requested {k}")

    top = candidates[:k]
    samples = [SceneMode(a2l, tuple(HomotopyClass(h) for h in a2a)) for _, a2l, a2a in top]
    logps = np.array([c[0] for c in top])

    gt_index: Optional[int] = None
    if gtsm is not None:
        gt_key = gtsm.key()
        for i, s in enumerate(samples):
            if s.key() == gt_key:
                gt_index = i
                break
        if gt_index is None:
            samples[-1] = gtsm
            logps[-1] = _mode_logp(proposal, gtsm)
            gt_index = k - 1
    return SMSampleSet(samples, logps, gt_index)


def _mode_logp(marginals: MarginalDist, mode: SceneMode) -> float:
    logp = 0.0
    for i, lane in enumerate(mode.a2l):
        logp += float(marginals.a2l_logp[i, lane])
    for p, h in enumerate(mode.a2a):
        logp += float(marginals.a2a_logp[p, int(h)])
    return logp
