"""Hierarchical frontier planning over the attribute map.

Frontier edges (connected frontier components) are scored by target-room
affinity from fused attributes, unexplored mass, and travel cost; a TSP
solver orders the top edges; waypoints are sampled along the geodesic path
to the first edge. The step policy follows the paper's three stages:
prioritize likely regions, explore the identified zone, then local object
search. A remote chat-completion reasoner can replace the rule-based edge
ranking; every failure falls back to the rules.
"""

from __future__ import annotations

import base64
import itertools
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import simcore
from .eam import (
    Eam,
    Explore,
    PropagationConfig,
    Provenance,
    attribute_argmax_map,
    eam_for_model,
    fuse_prediction,
    ground_attributes,
    integrate_observation,
    propagate_attributes,
)
from .grounding import EmbeddingModel
from .simcore import Action, AgentPose, HEADING_VECTORS
from .worldgen import N_ROOM_CATEGORIES, PriorTable

log = logging.getLogger(__name__)


@dataclass
class FrontierEdge:
    id: int
    cells: list[tuple[int, int]]
    centroid: tuple[int, int]
    unknown_mass: int
    attribute_score: np.ndarray  # per-class mean cosine affinity
    value: float = 0.0
    geodesic: float = math.inf


@dataclass
class ReasonerDecision:
    ranking: list[int]  # edge ids, best first
    values: list[float]
    rationale: str = ""
    source: str = "rule"


@dataclass
class TspInstance:
    start: tuple[int, int]
    nodes: list[tuple[int, int]]
    dist: np.ndarray  # (n, n) pairwise geodesic, symmetric, zero diagonal
    start_dist: np.ndarray  # (n,) geodesic from start to each node


@dataclass(frozen=True)
class PlannerConfig:
    min_edge_size: int = 3
    radius: int = 6  # attribute/unknown-mass neighborhood around centroids
    lambda_affinity: float = 1.0
    lambda_unknown: float = 0.4
    lambda_distance: float = 0.3
    top_k: int = 6
    waypoint_spacing: int = 4
    stall_steps: int = 20
    replan_period: int = 12
    success_radius: float = 2.0
    target_prob_threshold: float = 0.25
    min_ground_objects: int = 3
    propagate_every: int = 4
    propagation: PropagationConfig = field(default_factory=lambda: PropagationConfig(iterations=2))
    fusion_samples: int = 4
    fusion_growth: float = 0.12  # re-fuse when observed fraction grows this much
    blacklist_steps: int = 60


class ReplanNeeded(Exception):
    """Raised when the active path can no longer be followed."""


def extract_frontiers(eam: Eam, cfg: PlannerConfig = PlannerConfig()) -> list[FrontierEdge]:
    """Connected frontier components (8-connectivity), small ones dropped."""
    mask = eam.frontier_mask()
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    unknown = eam.exploration == Explore.UNKNOWN
    informative = (eam.provenance == Provenance.PROPAGATED) | (
        eam.provenance == Provenance.PREDICTED
    )
    attr = eam.attribute_layer
    norms = np.linalg.norm(attr, axis=2, keepdims=True)
    unit_attr = attr / np.maximum(norms, 1e-12)
    informative = informative & (norms[:, :, 0] > 1e-12)

    yy, xx = np.mgrid[0:eam.height, 0:eam.width]
    edges: list[FrontierEdge] = []
    for comp in range(1, n + 1):
        ys, xs = np.nonzero(labels == comp)
        if len(xs) < cfg.min_edge_size:
            continue
        cells = sorted(zip(xs.tolist(), ys.tolist()))
        mx, my = np.mean([c[0] for c in cells]), np.mean([c[1] for c in cells])
        centroid = min(cells, key=lambda c: ((c[0] - mx) ** 2 + (c[1] - my) ** 2, c))
        disc = (xx - centroid[0]) ** 2 + (yy - centroid[1]) ** 2 <= cfg.radius ** 2
        unknown_mass = int((disc & unknown).sum())
        sel = disc & informative
        if sel.any():
            score = (unit_attr[sel] @ eam.anchors.T).mean(axis=0)
        else:
            score = np.zeros(eam.anchors.shape[0])
        edges.append(FrontierEdge(len(edges), cells, centroid, unknown_mass, score))
    return edges


def score_edges(
    edges: list[FrontierEdge],
    eam: Eam,
    agent_cell: tuple[int, int],
    target_class: int | None,
    priors: PriorTable,
    cfg: PlannerConfig = PlannerConfig(),
    dist: np.ndarray | None = None,
) -> list[FrontierEdge]:
    """Value each edge and return them ranked; unreachable edges dropped.

    value = l1 * target-room affinity + l2 * unknown_mass / radius^2
          - l3 * geodesic(agent, centroid) / grid diagonal
    Ranking ties break by centroid order.
    """
    if dist is None:
        dist = simcore.distance_field(eam.known_free(), [agent_cell])
    diag = math.hypot(eam.width, eam.height)
    room_prior = None
    if target_class is not None:
        room_prior = priors.p_room_given_obj[target_class]
    kept = []
    for e in edges:
        d = float(dist[e.centroid[1], e.centroid[0]])
        if not math.isfinite(d):
            continue
        e.geodesic = d
        affinity = float(room_prior @ e.attribute_score) if room_prior is not None else 0.0
        e.value = (
            cfg.lambda_affinity * affinity
            + cfg.lambda_unknown * e.unknown_mass / cfg.radius ** 2
            - cfg.lambda_distance * d / diag
        )
        kept.append(e)
    kept.sort(key=lambda e: (-e.value, e.centroid))
    return kept


# -- TSP --------------------------------------------------------------------------

def make_tsp_instance(
    known_free: np.ndarray, start: tuple[int, int], nodes: list[tuple[int, int]]
) -> TspInstance:
    n = len(nodes)
    dist = np.zeros((n, n))
    start_dist = np.zeros(n)
    graph = simcore.grid_graph(known_free)
    fields = [simcore.distance_field(known_free, [c], graph=graph) for c in nodes]
    for i in range(n):
        start_dist[i] = fields[i][start[1], start[0]]
        for j in range(n):
            dist[i, j] = fields[i][nodes[j][1], nodes[j][0]]
    dist = (dist + dist.T) / 2.0  # symmetrize float noise
    np.fill_diagonal(dist, 0.0)
    return TspInstance(start, nodes, dist, start_dist)


def held_karp_path(instance: TspInstance) -> list[int]:
    """Exact open-path DP: start at `start`, visit every node once."""
    n = len(instance.nodes)
    d = instance.dist
    sd = instance.start_dist
    best = {}
    choice = {}
    for j in range(n):
        best[(1 << j, j)] = sd[j]
    for size in range(2, n + 1):
        for subset in itertools.combinations(range(n), size):
            mask = 0
            for j in subset:
                mask |= 1 << j
            for j in subset:
                prev_mask = mask ^ (1 << j)
                cands = [
                    (best[(prev_mask, i)] + d[i, j], i)
                    for i in subset
                    if i != j and (prev_mask, i) in best
                ]
                if cands:
                    cost, arg = min(cands)
                    best[(mask, j)] = cost
                    choice[(mask, j)] = arg
    full = (1 << n) - 1
    cost, last = min((best[(full, j)], j) for j in range(n))
    order = [last]
    mask = full
    while (mask, order[-1]) in choice:
        prev = choice[(mask, order[-1])]
        mask ^= 1 << order[-1]
        order.append(prev)
    return order[::-1]


def path_length(instance: TspInstance, order: list[int]) -> float:
    total = instance.start_dist[order[0]]
    for a, b in zip(order, order[1:]):
        total += instance.dist[a, b]
    return float(total)


def nearest_neighbor_path(instance: TspInstance) -> list[int]:
    n = len(instance.nodes)
    todo = set(range(n))
    order = []
    cur_cost = instance.start_dist
    while todo:
        j = min(todo, key=lambda k: (cur_cost[k], k))
        order.append(j)
        todo.remove(j)
        cur_cost = instance.dist[j]
    return order


def two_opt(instance: TspInstance, order: list[int]) -> list[int]:
    order = list(order)
    improved = True
    while improved:
        improved = False
        for i in range(len(order) - 1):
            for j in range(i + 1, len(order)):
                cand = order[:i] + order[i:j + 1][::-1] + order[j + 1:]
                if path_length(instance, cand) < path_length(instance, order) - 1e-12:
                    order = cand
                    improved = True
    return order


def solve_tsp(instance: TspInstance, exact_limit: int = 12) -> list[int]:
    """Visitation order (node indices): exact DP for small n, NN + 2-opt above."""
    n = len(instance.nodes)
    if n == 0:
        raise ValueError("empty TSP instance")
    if not np.all(np.isfinite(instance.dist)) or not np.all(np.isfinite(instance.start_dist)):
        raise ValueError("TSP instance contains unreachable nodes")
    if n == 1:
        return [0]
    if n <= exact_limit:
        return held_karp_path(instance)
    return two_opt(instance, nearest_neighbor_path(instance))


# -- waypoints ----------------------------------------------------------------------

_NEIGHBOR_ORDER = [(1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, 1), (-1, -1), (1, -1)]


def geodesic_path(
    free: np.ndarray, start: tuple[int, int], goal: tuple[int, int]
) -> list[tuple[int, int]] | None:
    """Shortest 8-connected path (cells, start excluded), or None."""
    if start == goal:
        return []
    d = simcore.distance_field(free, [goal])
    if not math.isfinite(d[start[1], start[0]]):
        return None
    path = []
    cur = start
    h, w = free.shape
    while cur != goal:
        best = None
        cx, cy = cur
        for dx, dy in _NEIGHBOR_ORDER:
            nx, ny = cx + dx, cy + dy
            if 0 <= nx < w and 0 <= ny < h and free[ny, nx]:
                step = math.sqrt(2.0) if dx and dy else 1.0
                cand = (d[ny, nx] + step, (nx, ny))
                if best is None or cand[0] < best[0] - 1e-12:
                    best = cand
        cur = best[1]
        path.append(cur)
        if len(path) > free.size:
            return None
    return path


def sample_waypoints(
    order: list[FrontierEdge],
    eam: Eam,
    agent_cell: tuple[int, int],
    spacing: int = 4,
) -> list[tuple[int, int]]:
    """Waypoints every `spacing` cells along the path to the first edge.

    Raises ReplanNeeded when no path exists over known-free space.
    """
    if not order:
        raise ValueError("empty visitation order")
    goal = order[0].centroid
    path = geodesic_path(eam.known_free(), agent_cell, goal)
    if path is None:
        raise ReplanNeeded(f"no known-free path to {goal}")
    if not path:
        return [goal]
    waypoints = [path[i] for i in range(spacing - 1, len(path) - 1, spacing)]
    waypoints.append(goal)
    return waypoints


# -- remote reasoner -----------------------------------------------------------------

REASONER_PROMPT = (
    "You rank exploration frontiers for an indoor object-search robot. "
    "You receive the navigation target, a table of frontier edges (id, "
    "grid position, unexplored-area size, room-affinity scores) and a "
    "top-view map image. Reply with a JSON list of all edge ids ordered "
    "from most to least promising, e.g. [2,0,1]. Reply with JSON only."
)


@dataclass(frozen=True)
class ReasonerEndpoint:
    url: str = ""
    model: str = "rule-based"
    deadline_s: float = 5.0
    enabled: bool = False


def _edge_table(edges: list[FrontierEdge], class_names) -> list[dict]:
    rows = []
    for e in edges:
        top = np.argsort(e.attribute_score)[::-1][:3]
        rows.append(
            {
                "id": e.id,
                "centroid": list(e.centroid),
                "unknown_mass": e.unknown_mass,
                "geodesic": round(e.geodesic, 2),
                "top_affinities": {str(class_names[i]): round(float(e.attribute_score[i]), 3) for i in top},
            }
        )
    return rows


def remote_reasoner_propose(
    edges: list[FrontierEdge],
    eam: Eam,
    target_name: str,
    endpoint: ReasonerEndpoint,
    class_names=None,
) -> ReasonerDecision:
    """Ask a chat-completion endpoint to rank the edges; fall back to the
    rule ranking (the order of `edges`) on any failure."""
    fallback = ReasonerDecision(
        [e.id for e in edges], [e.value for e in edges], source="fallback"
    )
    if not edges:
        return fallback
    if class_names is None:
        from .worldgen import ENV_CLASSES

        class_names = ENV_CLASSES
    try:
        import requests

        from .render import render_eam_png

        payload = {
            "model": endpoint.model,
            "messages": [
                {"role": "system", "content": REASONER_PROMPT},
                {
                    "role": "user",
                    "content": json.dumps(
                        {
                            "target": target_name,
                            "edges": _edge_table(edges, class_names),
                            "map_png_base64": base64.b64encode(render_eam_png(eam)).decode(),
                        }
                    ),
                },
            ],
        }
        resp = requests.post(endpoint.url, json=payload, timeout=endpoint.deadline_s)
        resp.raise_for_status()
        content = resp.json()["choices"][0]["message"]["content"]
        ranking = json.loads(content)
        if sorted(ranking) != sorted(e.id for e in edges):
            raise ValueError(f"reply is not a permutation of edge ids: {ranking}")
        by_id = {e.id: e for e in edges}
        return ReasonerDecision(
            list(ranking),
            [by_id[i].value for i in ranking],
            rationale=str(content),
            source="remote",
        )
    except Exception as exc:  # noqa: BLE001 - any failure means fallback
        log.warning("remote reasoner failed (%s); using rule-based ranking", exc)
        return fallback


# -- policies ------------------------------------------------------------------------

def _turn_toward(heading: int, want: int) -> Action:
    delta = (want - heading) % 8
    if delta == 0:
        return Action.FORWARD
    return Action.TURN_RIGHT if delta <= 4 else Action.TURN_LEFT


def _heading_for(src: tuple[int, int], dst: tuple[int, int]) -> int:
    dx = int(np.sign(dst[0] - src[0]))
    dy = int(np.sign(dst[1] - src[1]))
    return HEADING_VECTORS.index((dx, dy))


class NavPolicy:
    """Shared observation-integration and path-following machinery."""

    name = "base"

    def __init__(
        self,
        model: EmbeddingModel,
        priors: PriorTable,
        cfg: PlannerConfig = PlannerConfig(),
        denoiser=None,
        schedule=None,
        seed: int = 0,
    ):
        self.model = model
        self.priors = priors
        self.cfg = cfg
        self.denoiser = denoiser
        self.schedule = schedule
        self.seed = seed
        self.eam: Eam | None = None

    def reset(self, width: int, height: int, target_class: int | None, seed: int) -> None:
        self.eam = eam_for_model(width, height, self.model)
        self.target = target_class
        self.rng = np.random.default_rng(seed)
        self.steps = 0
        self.path: list[tuple[int, int]] = []
        self.waypoints: list[tuple[int, int]] = []
        self.goal_edge: FrontierEdge | None = None
        self.failed = False
        self.stall = 0
        self.best_goal_dist = math.inf
        self.last_fuse_fraction = 0.0
        self.blacklist: dict[tuple[int, int], int] = {}
        self.last_ground_step = -99
        self.replans = 0
        self.fusions = 0

    # -- per-subclass hooks --

    def update_map(self, obs: simcore.Observation) -> None:
        integrate_observation(self.eam, obs)

    def choose_edge(self, edges: list[FrontierEdge], pose: AgentPose, dist) -> FrontierEdge:
        raise NotImplementedError

    # -- shared machinery --

    def _target_cells(self) -> np.ndarray:
        if self.target is None:
            return np.zeros((0, 2), dtype=int)
        layer = self.eam.object_layer[:, :, self.target]
        ys, xs = np.nonzero(layer >= self.cfg.target_prob_threshold)
        return np.column_stack([xs, ys])

    def _replan(self, pose: AgentPose) -> bool:
        """Pick a goal edge and refresh the waypoint path. False = exhausted."""
        self.replans += 1
        self.blacklist = {c: n for c, n in self.blacklist.items() if n > self.steps}
        edges = extract_frontiers(self.eam, self.cfg)
        if not edges and self.eam.frontier_mask().any():
            # a barely-opened map may hold only sub-threshold frontier islands
            from dataclasses import replace as _replace

            edges = extract_frontiers(self.eam, _replace(self.cfg, min_edge_size=1))
        edges = [e for e in edges if e.centroid not in self.blacklist]
        if not edges:
            edges = extract_frontiers(self.eam, self.cfg)  # ignore blacklist rather than stop
        if not edges:
            return False
        dist = simcore.distance_field(self.eam.known_free(), [pose.cell])
        edges = score_edges(
            edges, self.eam, pose.cell, self.target, self.priors, self.cfg, dist=dist
        )
        if not edges:
            return False
        try:
            edge = self.choose_edge(edges, pose, dist)
            self.waypoints = sample_waypoints([edge], self.eam, pose.cell,
                                              spacing=self.cfg.waypoint_spacing)
        except ReplanNeeded:
            return False
        self.goal_edge = edge
        self.path = geodesic_path(self.eam.known_free(), pose.cell, self.waypoints[0]) or []
        self.stall = 0
        self.best_goal_dist = math.inf
        return True

    def _path_blocked(self) -> bool:
        known_free = self.eam.known_free()
        for x, y in self.path[:2]:
            if not known_free[y, x]:
                return True
        return False

    def _advance(self, pose: AgentPose) -> Action:
        """Follow the stored path; heading-align then move forward."""
        while self.path and self.path[0] == pose.cell:
            self.path.pop(0)
        if not self.path:
            if self.waypoints and pose.cell == self.waypoints[0]:
                self.waypoints.pop(0)
            if self.waypoints:
                self.path = geodesic_path(self.eam.known_free(), pose.cell, self.waypoints[0]) or []
            if not self.path:
                # standing on the goal: scan in place while unknown space
                # still touches this cell, otherwise hand back for a replan
                x, y = pose.cell
                exp = self.eam.exploration
                for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    nx, ny = x + dx, y + dy
                    if 0 <= nx < self.eam.width and 0 <= ny < self.eam.height:
                        if exp[ny, nx] == Explore.UNKNOWN:
                            return Action.TURN_RIGHT
                raise ReplanNeeded("path consumed")
        want = _heading_for(pose.cell, self.path[0])
        return _turn_toward(pose.heading, want)

    def act(self, obs: simcore.Observation) -> Action:
        pose = obs.pose
        self.steps += 1
        self.update_map(obs)

        # stage 3 terminal rule: believed target within the success radius
        targets = self._target_cells()
        target_dist = None
        if len(targets):
            target_dist = simcore.distance_field(
                self.eam.known_free(), [pose.cell]
            )
            dists = [target_dist[y, x] for x, y in targets]
            if min(dists) <= self.cfg.success_radius:
                return Action.STOP
            # approach the nearest believed target cell
            best = targets[int(np.argmin(dists))]
            goal = (int(best[0]), int(best[1]))
            if not self.path or self.path[-1] != goal:
                self.path = geodesic_path(self.eam.known_free(), pose.cell, goal) or []
                self.waypoints = [goal]
            if self.path:
                try:
                    return self._advance(pose)
                except ReplanNeeded:
                    pass

        # stall detection: no geodesic progress toward the active waypoint
        if self.waypoints:
            wp = self.waypoints[0]
            d_wp = math.hypot(wp[0] - pose.cell[0], wp[1] - pose.cell[1])
            if d_wp < self.best_goal_dist - 1e-9:
                self.best_goal_dist = d_wp
                self.stall = 0
            else:
                self.stall += 1

        need_replan = (
            not self.waypoints
            or self.goal_edge is None
            or self.steps % self.cfg.replan_period == 0
            or self._path_blocked()
            or not self._goal_edge_alive()
        )
        if self.stall >= self.cfg.stall_steps:
            if self.goal_edge is not None:
                self.blacklist[self.goal_edge.centroid] = self.steps + self.cfg.blacklist_steps
            need_replan = True
        if need_replan and not self._replan(pose):
            self.failed = self.target is not None
            return Action.STOP
        try:
            return self._advance(pose)
        except ReplanNeeded:
            if self._replan(pose):
                try:
                    return self._advance(pose)
                except ReplanNeeded:
                    pass
            self.failed = self.target is not None
            return Action.STOP

    def _goal_edge_alive(self) -> bool:
        if self.goal_edge is None:
            return False
        frontier = self.eam.frontier_mask()
        alive = sum(frontier[y, x] for x, y in self.goal_edge.cells)
        return alive >= max(1, len(self.goal_edge.cells) // 4)


class FrontierNearestPolicy(NavPolicy):
    """Always walks to the geodesically nearest frontier edge."""

    name = "frontier-nearest"

    def choose_edge(self, edges, pose, dist):
        return min(edges, key=lambda e: (e.geodesic, e.centroid))


class RandomFrontierPolicy(NavPolicy):
    """Picks a uniformly random frontier edge, keeping it until it dies."""

    name = "random-frontier"

    def choose_edge(self, edges, pose, dist):
        return edges[int(self.rng.integers(len(edges)))]


class EamNavPolicy(NavPolicy):
    """Full pipeline: grounding, propagation, diffusion fusion, staged policy."""

    name = "eamnav-full"

    def __init__(self, *args, use_completion: bool = True,
                 endpoint: ReasonerEndpoint | None = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.use_completion = use_completion
        self.endpoint = endpoint or ReasonerEndpoint()

    def update_map(self, obs: simcore.Observation) -> None:
        integrate_observation(self.eam, obs)
        seeded = ground_attributes(
            self.eam, self.model, obs, min_objects=self.cfg.min_ground_objects
        )
        if seeded and self.steps - self.last_ground_step >= self.cfg.propagate_every:
            propagate_attributes(self.eam, self.cfg.propagation)
            self.last_ground_step = self.steps
        if self.use_completion and self.denoiser is not None:
            known = self.eam.exploration != Explore.UNKNOWN
            fraction = float(known.mean())
            if fraction - self.last_fuse_fraction >= self.cfg.fusion_growth:
                self._fuse(fraction)

    def _fuse(self, fraction: float) -> None:
        from .bridge import predict_completions

        samples = predict_completions(
            self.eam,
            self.denoiser,
            self.schedule,
            n_samples=self.cfg.fusion_samples,
            rng=self.rng,
        )
        fuse_prediction(self.eam, samples)
        self.last_fuse_fraction = fraction
        self.fusions += 1

    def _local_search_goal(self, pose: AgentPose) -> tuple[int, int] | None:
        """Inside a region whose argmax attribute tops the target prior:
        head for the nearest in-region frontier cell."""
        if self.target is None:
            return None
        want = int(np.argmax(self.priors.p_room_given_obj[self.target]))
        argmax = attribute_argmax_map(self.eam)
        x, y = pose.cell
        if argmax[y, x] != want:
            return None
        region = (argmax == want) & self.eam.known_free()
        labels, _ = ndimage.label(region, structure=np.ones((3, 3)))
        mine = labels == labels[y, x]
        frontier = self.eam.frontier_mask() & mine
        ys, xs = np.nonzero(frontier)
        if not len(xs):
            return None
        d = simcore.distance_field(self.eam.known_free(), [pose.cell])
        dists = d[ys, xs]
        if not np.isfinite(dists).any():
            return None
        j = int(np.argmin(dists))
        return (int(xs[j]), int(ys[j]))

    def choose_edge(self, edges, pose, dist):
        # stage 2: local search when already inside the likely target region
        local = self._local_search_goal(pose)
        if local is not None:
            for e in edges:
                if local in e.cells:
                    return e
        ranked = edges
        if self.endpoint.enabled:
            from .worldgen import ENV_CLASSES, OBJECT_VOCAB

            target_name = OBJECT_VOCAB[self.target] if self.target is not None else "explore"
            decision = remote_reasoner_propose(
                edges, self.eam, target_name, self.endpoint, ENV_CLASSES
            )
            by_id = {e.id: e for e in edges}
            ranked = [by_id[i] for i in decision.ranking]
        # stage 1: TSP over the top-valued edges, pure geodesic cost
        top = ranked[: self.cfg.top_k]
        if len(top) == 1:
            return top[0]
        instance = make_tsp_instance(self.eam.known_free(), pose.cell,
                                     [e.centroid for e in top])
        try:
            order = solve_tsp(instance)
        except ValueError:
            return top[0]
        return top[order[0]]


POLICY_NAMES = (
    "eamnav-full",
    "frontier-nearest",
    "random-frontier",
    "eam-no-completion",
    "eam-untrained-grounding",
)
