"""Seeded navigation episodes, metrics, and paired benchmark experiments.

Metrics: success rate, success weighted by path length, scene understanding
consistency (argmax attribute agreement with ground-truth room categories),
effective prediction percentage (correct predicted area over observed area)
and the normalized accumulated-remaining-distance cost of a trajectory.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import simcore
from .eam import Eam, Explore, Provenance, attribute_argmax_map
from .planner import (
    EamNavPolicy,
    FrontierNearestPolicy,
    PlannerConfig,
    RandomFrontierPolicy,
    POLICY_NAMES,
)
from .simcore import Action, AgentPose, SensorConfig
from .worldgen import FloorPlan, GenConfig, N_ROOM_CATEGORIES, generate_floor_plan, place_objects

SUCCESS_RADIUS = 2.0  # cells; 1 cell = 0.5 m nominal


@dataclass(frozen=True)
class EpisodeSpec:
    world_seed: int
    start: tuple[int, int]
    start_heading: int
    target_class: int
    seed: int
    step_budget: int = 500


@dataclass
class EpisodeResult:
    spec: EpisodeSpec
    policy: str
    success: bool
    stop_called: bool
    path_length: float
    shortest_length: float
    steps: int
    collisions: int
    trajectory: list[tuple[int, int, int]]
    c_eval: float
    suc: float | None
    epp: float | None
    eam_final: Eam | None = None

    def spl_term(self) -> float:
        if not self.success:
            return 0.0
        denom = max(self.path_length, self.shortest_length)
        return 1.0 if denom == 0 else self.shortest_length / denom


@dataclass
class PolicyRow:
    policy: str
    sr: float
    spl: float
    suc: float | None
    epp: float | None
    c_eval: float
    n: int


@dataclass
class MetricsReport:
    rows: list[PolicyRow]
    n_episodes: int
    fingerprint: str
    episodes: list[EpisodeResult] = field(default_factory=list)


def target_instances(plan: FloorPlan, target_class: int) -> list[tuple[int, int]]:
    return [o.cell for o in plan.objects if o.class_id == target_class]


def goal_distance_field(plan: FloorPlan, target_class: int) -> np.ndarray:
    cells = target_instances(plan, target_class)
    if not cells:
        raise ValueError(f"no instance of class {target_class} in the plan")
    return simcore.distance_field(plan.free_mask(), cells)


def run_episode(
    plan: FloorPlan,
    policy,
    spec: EpisodeSpec,
    sensors: SensorConfig = SensorConfig(),
    keep_eam: bool = False,
) -> EpisodeResult:
    """Observe/decide/step until Stop or budget; all randomness from the seed."""
    if not simcore.is_free(plan, spec.start):
        raise ValueError(f"start {spec.start} is not free")
    goal_field = goal_distance_field(plan, spec.target_class)
    d0 = float(goal_field[spec.start[1], spec.start[0]])
    if not math.isfinite(d0):
        raise ValueError("target unreachable from start")

    rng = np.random.default_rng(spec.seed)
    policy.reset(plan.width, plan.height, spec.target_class, spec.seed)
    pose = AgentPose(spec.start, spec.start_heading)
    trajectory = [(pose.cell[0], pose.cell[1], pose.heading)]
    path_length = 0.0
    collisions = 0
    stop_called = False
    steps = 0
    for t in range(spec.step_budget):
        obs = simcore.observe(plan, pose, sensors, rng, t)
        action = policy.act(obs)
        steps += 1
        if action == Action.STOP:
            stop_called = True
            break
        new_pose = simcore.step(plan, pose, action)
        if action == Action.FORWARD:
            if new_pose.cell == pose.cell:
                collisions += 1
            else:
                dx = abs(new_pose.cell[0] - pose.cell[0])
                dy = abs(new_pose.cell[1] - pose.cell[1])
                path_length += math.sqrt(2.0) if dx and dy else 1.0
        pose = new_pose
        trajectory.append((pose.cell[0], pose.cell[1], pose.heading))

    final_goal_dist = float(goal_field[pose.cell[1], pose.cell[0]])
    success = stop_called and final_goal_dist <= SUCCESS_RADIUS
    c_eval = float(
        sum(goal_field[y, x] for x, y, _ in trajectory) / d0
    )
    eam = getattr(policy, "eam", None)
    suc = scene_understanding_consistency(eam, plan) if eam is not None else None
    epp = effective_prediction_percentage(eam, plan) if eam is not None else None
    return EpisodeResult(
        spec=spec,
        policy=getattr(policy, "name", type(policy).__name__),
        success=success,
        stop_called=stop_called,
        path_length=path_length,
        shortest_length=d0,
        steps=steps,
        collisions=collisions,
        trajectory=trajectory,
        c_eval=c_eval,
        suc=suc,
        epp=epp,
        eam_final=eam if keep_eam else None,
    )


# -- metrics -------------------------------------------------------------------

def success_rate(results: list[EpisodeResult]) -> float:
    if not results:
        raise ValueError("no results")
    return sum(r.success for r in results) / len(results)


def spl(results: list[EpisodeResult]) -> float:
    if not results:
        raise ValueError("no results")
    return float(np.mean([r.spl_term() for r in results]))


def scene_understanding_consistency(eam: Eam, plan: FloorPlan) -> float | None:
    """Fraction of attribute-covered room cells whose argmax class matches
    the ground-truth room category; None when nothing is covered."""
    argmax = attribute_argmax_map(eam)
    covered = (eam.provenance != Provenance.UNOBSERVED) & (argmax >= 0)
    room = plan.cells < N_ROOM_CATEGORIES
    sel = covered & room
    if not sel.any():
        return None
    return float((argmax[sel] == plan.cells[sel]).mean())


def effective_prediction_percentage(eam: Eam, plan: FloorPlan) -> float | None:
    """Correctly predicted cells relative to the observed (non-unknown) area."""
    observed = eam.exploration != Explore.UNKNOWN
    n_observed = int(observed.sum())
    if n_observed == 0:
        return None
    argmax = attribute_argmax_map(eam)
    predicted = eam.provenance == Provenance.PREDICTED
    room = plan.cells < N_ROOM_CATEGORIES
    correct = predicted & room & (argmax == plan.cells.astype(np.int16))
    return float(correct.sum() / n_observed)


def eval_cost(
    trajectory: list[tuple[int, int, int]] | list[tuple[int, int]],
    plan: FloorPlan,
    target_class: int,
) -> float:
    """Accumulated remaining geodesic distance, normalized by the start's."""
    if not trajectory:
        raise ValueError("empty trajectory")
    goal_field = goal_distance_field(plan, target_class)
    poses = [(p[0], p[1]) for p in trajectory]
    d0 = float(goal_field[poses[0][1], poses[0][0]])
    if not math.isfinite(d0) or d0 == 0:
        if d0 == 0:
            return float(len(poses)) if all(p == poses[0] for p in poses) else float("nan")
        raise ValueError("goal unreachable from trajectory start")
    total = sum(float(goal_field[y, x]) for x, y in poses)
    return total / d0


# -- benchmark ----------------------------------------------------------------------

@dataclass(frozen=True)
class BenchConfig:
    policies: tuple[str, ...] = ("eamnav-full", "frontier-nearest")
    n_episodes: int = 20
    world_seed_base: int = 0
    episode_seed_base: int = 10_000
    min_start_goal: float = 30.0  # long-range filter, cells
    step_budget: int = 500
    object_density: int = 5
    gen: GenConfig = field(default_factory=GenConfig)
    sensors: SensorConfig = field(default_factory=SensorConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class BenchModels:
    """In-memory artifacts a benchmark run needs."""

    embedder: object  # trained EmbeddingModel
    random_embedder: object
    priors: object
    denoiser: object = None
    schedule: object = None


def make_policy(name: str, models: BenchModels, cfg: PlannerConfig, seed: int = 0):
    if name == "eamnav-full":
        p = EamNavPolicy(models.embedder, models.priors, cfg,
                         denoiser=models.denoiser, schedule=models.schedule)
    elif name == "eam-no-completion":
        p = EamNavPolicy(models.embedder, models.priors, cfg, use_completion=False)
        p.name = "eam-no-completion"
    elif name == "eam-untrained-grounding":
        p = EamNavPolicy(models.random_embedder, models.priors, cfg,
                         denoiser=models.denoiser, schedule=models.schedule)
        p.name = "eam-untrained-grounding"
    elif name == "frontier-nearest":
        p = FrontierNearestPolicy(models.embedder, models.priors, cfg)
    elif name == "random-frontier":
        p = RandomFrontierPolicy(models.embedder, models.priors, cfg)
    else:
        raise ValueError(f"unknown policy {name!r}; expected one of {POLICY_NAMES}")
    return p


def sample_episode(
    cfg: BenchConfig, index: int, priors
) -> tuple[FloorPlan, EpisodeSpec]:
    """Deterministic rejection sampling of a long-range episode."""
    attempt = 0
    while True:
        world_seed = cfg.world_seed_base + index * 97 + attempt
        plan = place_objects(
            generate_floor_plan(cfg.gen, world_seed), priors,
            cfg.object_density, world_seed + 1,
        )
        rng = np.random.default_rng(cfg.episode_seed_base + index * 131 + attempt)
        free = plan.free_mask()
        ys, xs = np.nonzero(free)
        present = sorted({o.class_id for o in plan.objects})
        for _ in range(40):
            i = int(rng.integers(len(xs)))
            start = (int(xs[i]), int(ys[i]))
            d = simcore.distance_field(free, [start])
            candidates = []
            for cls in present:
                dists = [d[y, x] for x, y in target_instances(plan, cls)]
                nearest = min(dists)
                if math.isfinite(nearest) and nearest >= cfg.min_start_goal:
                    candidates.append(cls)
            if candidates:
                target = candidates[int(rng.integers(len(candidates)))]
                heading = int(rng.integers(8))
                spec = EpisodeSpec(
                    world_seed, start, heading, target,
                    cfg.episode_seed_base + index, cfg.step_budget,
                )
                return plan, spec
        attempt += 1
        if attempt > 25:
            raise RuntimeError(f"cannot sample a long-range episode for index {index}")


def run_benchmark(cfg: BenchConfig, models: BenchModels, progress=None) -> MetricsReport:
    """Paired episodes across policies; aggregation keyed by episode index."""
    for name in cfg.policies:
        if name not in POLICY_NAMES:
            raise ValueError(f"unknown policy {name!r}; expected one of {POLICY_NAMES}")
    episodes: list[EpisodeResult] = []
    for i in range(cfg.n_episodes):
        plan, spec = sample_episode(cfg, i, models.priors)
        for name in cfg.policies:
            policy = make_policy(name, models, cfg.planner)
            result = run_episode(plan, policy, spec, cfg.sensors)
            episodes.append(result)
            if progress:
                progress(i, name, result)
    rows = []
    for name in cfg.policies:
        sub = [r for r in episodes if r.policy == name]
        sucs = [r.suc for r in sub if r.suc is not None]
        epps = [r.epp for r in sub if r.epp is not None]
        rows.append(
            PolicyRow(
                policy=name,
                sr=success_rate(sub),
                spl=spl(sub),
                suc=float(np.mean(sucs)) if sucs else None,
                epp=float(np.mean(epps)) if epps else None,
                c_eval=float(np.mean([r.c_eval for r in sub])),
                n=len(sub),
            )
        )
    return MetricsReport(rows, cfg.n_episodes, cfg.fingerprint(), episodes)


def paired_bootstrap_ci(
    a_terms: list[float], b_terms: list[float], n_boot: int = 10_000, seed: int = 0,
    confidence: float = 0.95,
) -> tuple[float, float, float]:
    """(low, high, mean) percentile CI of mean(a - b) over paired episodes."""
    if len(a_terms) != len(b_terms) or not a_terms:
        raise ValueError("paired samples required")
    diffs = np.asarray(a_terms) - np.asarray(b_terms)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(diffs), size=(n_boot, len(diffs)))
    means = diffs[idx].mean(axis=1)
    alpha = (1.0 - confidence) / 2.0
    return (
        float(np.quantile(means, alpha)),
        float(np.quantile(means, 1.0 - alpha)),
        float(diffs.mean()),
    )


# -- reporting -----------------------------------------------------------------------

CSV_HEADER = (
    "episode,policy,world_seed,start_x,start_y,target,success,spl,"
    "path_length,shortest,steps,collisions,c_eval,suc,epp"
)


def episodes_csv(report: MetricsReport) -> str:
    lines = [CSV_HEADER]
    by_spec: dict[tuple, int] = {}
    for r in report.episodes:
        key = (r.spec.world_seed, r.spec.start, r.spec.target_class)
        eid = by_spec.setdefault(key, len(by_spec))
        fmt = lambda v: "" if v is None else f"{v:.6f}"
        lines.append(
            f"{eid},{r.policy},{r.spec.world_seed},{r.spec.start[0]},{r.spec.start[1]},"
            f"{r.spec.target_class},{int(r.success)},{r.spl_term():.6f},"
            f"{r.path_length:.6f},{r.shortest_length:.6f},{r.steps},{r.collisions},"
            f"{r.c_eval:.6f},{fmt(r.suc)},{fmt(r.epp)}"
        )
    return "\n".join(lines) + "\n"


def report_table(report: MetricsReport) -> str:
    lines = [
        f"benchmark fingerprint={report.fingerprint} episodes={report.n_episodes}",
        f"{'policy':<24} {'SR':>6} {'SPL':>6} {'SUC':>6} {'EPP':>6} {'C_eval':>8}",
    ]
    for row in report.rows:
        fmt = lambda v: "   -  " if v is None else f"{v:6.3f}"
        lines.append(
            f"{row.policy:<24} {row.sr:6.3f} {row.spl:6.3f} "
            f"{fmt(row.suc)} {fmt(row.epp)} {row.c_eval:8.3f}"
        )
    return "\n".join(lines) + "\n"


def episode_log_lines(report: MetricsReport) -> str:
    """Line-delimited JSON records, one per episode run."""
    out = []
    for r in report.episodes:
        out.append(
            json.dumps(
                {
                    "fingerprint": report.fingerprint,
                    "policy": r.policy,
                    "world_seed": r.spec.world_seed,
                    "start": list(r.spec.start),
                    "heading": r.spec.start_heading,
                    "target": r.spec.target_class,
                    "seed": r.spec.seed,
                    "success": r.success,
                    "stop_called": r.stop_called,
                    "spl": round(r.spl_term(), 6),
                    "path_length": round(r.path_length, 6),
                    "shortest": round(r.shortest_length, 6),
                    "steps": r.steps,
                    "collisions": r.collisions,
                    "c_eval": round(r.c_eval, 6),
                    "suc": None if r.suc is None else round(r.suc, 6),
                    "epp": None if r.epp is None else round(r.epp, 6),
                    "trajectory": [list(p) for p in r.trajectory],
                },
                sort_keys=True,
            )
        )
    return "\n".join(out) + "\n"


# -- component validation (exploration-only experiment) -----------------------------

@dataclass
class ValidationRow:
    variant: str
    suc: float | None
    epp: float | None
    explored_fraction: float


def run_component_validation(
    plan: FloorPlan,
    models: BenchModels,
    variant: str,
    seed: int,
    sensors: SensorConfig = SensorConfig(),
    planner_cfg: PlannerConfig = PlannerConfig(),
    step_budget: int = 600,
    epp_every: int = 25,
) -> ValidationRow:
    """Explore one closed world without a target; SUC at the end, EPP
    averaged over snapshots taken during exploration."""
    policy = make_policy(variant, models, planner_cfg)
    policy.reset(plan.width, plan.height, None, seed)
    rng = np.random.default_rng(seed)
    free = plan.free_mask()
    ys, xs = np.nonzero(free)
    i = int(np.random.default_rng(seed + 1).integers(len(xs)))
    pose = AgentPose((int(xs[i]), int(ys[i])), 0)
    epps = []
    for t in range(step_budget):
        obs = simcore.observe(plan, pose, sensors, rng, t)
        action = policy.act(obs)
        if action == Action.STOP:
            break
        pose = simcore.step(plan, pose, action)
        if (t + 1) % epp_every == 0:
            e = effective_prediction_percentage(policy.eam, plan)
            if e is not None:
                epps.append(e)
    suc = scene_understanding_consistency(policy.eam, plan)
    explored = float((policy.eam.exploration != Explore.UNKNOWN).mean())
    return ValidationRow(
        variant=variant,
        suc=suc,
        epp=float(np.mean(epps)) if epps else 0.0,
        explored_fraction=explored,
    )
