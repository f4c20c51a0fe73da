"""Procedural multi-room floor plans with zone-conditioned object placement.

Worlds are rectilinear: a 1-cell outside margin, a wall ring, and an interior
partitioned into rooms by seeded binary-space partition with doorway carving.
Each room gets a category from the environment taxonomy and objects sampled
from a room-conditioned prior table. Plans double as navigation ground truth
and as the training corpus for the floor-plan completion model.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field, replace

import numpy as np

# Environment taxonomy. The first N_ROOM_CATEGORIES labels are placeable room
# categories whose grid cell code equals their taxonomy index; the remainder
# exist only as classification targets (anchor rows) and carry zero frequency.
ENV_CLASSES: tuple[str, ...] = (
    "bedroom",
    "kitchen",
    "bathroom",
    "livingroom",
    "diningroom",
    "corridor",
    "office",
    "closet",
    "laundry",
    "garage",
    "storage",
    "lobby",
    "balcony",
    "gym",
    "library",
)
N_ENV_CLASSES = len(ENV_CLASSES)

N_ROOM_CATEGORIES = 14
WALL = 14
OUTSIDE = 15
N_CELL_CATEGORIES = 16  # 14 room categories + wall + outside

OBJECT_VOCAB: tuple[str, ...] = (
    # bedroom
    "bed", "nightstand", "wardrobe", "dresser",
    # kitchen
    "stove", "oven", "refrigerator", "kitchen_cabinet",
    # bathroom
    "toilet", "bathtub", "shower", "towel_rack",
    # livingroom
    "sofa", "tv", "coffee_table", "bookshelf",
    # diningroom
    "dining_table", "dining_chair",
    # corridor
    "coat_rack", "shoe_rack",
    # office
    "desk", "office_chair", "monitor", "filing_cabinet",
    # closet
    "hanger_rod", "shoe_box",
    # laundry
    "washer", "dryer", "laundry_basket",
    # garage
    "workbench", "toolbox", "bicycle",
    # storage
    "shelf_unit", "storage_box",
    # lobby
    "umbrella_stand", "bench",
    # balcony
    "planter", "deck_chair",
    # gym
    "treadmill", "dumbbell_rack",
)
N_OBJECTS = len(OBJECT_VOCAB)

# Signature objects per environment class (indices into OBJECT_VOCAB).
_SIGNATURES: dict[str, tuple[str, ...]] = {
    "bedroom": ("bed", "nightstand", "wardrobe", "dresser"),
    "kitchen": ("stove", "oven", "refrigerator", "kitchen_cabinet"),
    "bathroom": ("toilet", "bathtub", "shower", "towel_rack"),
    "livingroom": ("sofa", "tv", "coffee_table", "bookshelf"),
    "diningroom": ("dining_table", "dining_chair"),
    "corridor": ("coat_rack", "shoe_rack"),
    "office": ("desk", "office_chair", "monitor", "filing_cabinet"),
    "closet": ("hanger_rod", "shoe_box", "wardrobe"),
    "laundry": ("washer", "dryer", "laundry_basket"),
    "garage": ("workbench", "toolbox", "bicycle"),
    "storage": ("shelf_unit", "storage_box"),
    "lobby": ("umbrella_stand", "bench", "coat_rack"),
    "balcony": ("planter", "deck_chair"),
    "gym": ("treadmill", "dumbbell_rack"),
    "library": ("bookshelf", "desk"),
}

# Relative room-category frequencies used both by the generator and as the
# Bayes weights in the prior table. "library" never appears on the grid.
_ROOM_WEIGHTS: dict[str, float] = {
    "bedroom": 0.20,
    "kitchen": 0.12,
    "bathroom": 0.12,
    "livingroom": 0.15,
    "diningroom": 0.08,
    "corridor": 0.12,
    "office": 0.06,
    "closet": 0.04,
    "laundry": 0.03,
    "garage": 0.03,
    "storage": 0.02,
    "lobby": 0.012,
    "balcony": 0.008,
    "gym": 0.006,
    "library": 0.0,
}


class GenerationError(ValueError):
    """Invalid generator configuration or unsatisfiable layout request."""


@dataclass(frozen=True)
class RoomRegion:
    id: int
    category: int  # environment class id, < N_ROOM_CATEGORIES for generated rooms
    cells: tuple[tuple[int, int], ...]  # sorted (x, y) pairs

    @property
    def label(self) -> str:
        return ENV_CLASSES[self.category]


@dataclass(frozen=True)
class ObjectInstance:
    class_id: int
    cell: tuple[int, int]
    room_id: int


@dataclass
class FloorPlan:
    width: int
    height: int
    cells: np.ndarray  # (H, W) uint8 cell category codes
    rooms: list[RoomRegion]
    objects: list[ObjectInstance]
    seed: int
    room_id_grid: np.ndarray = field(default=None)  # (H, W) int16, -1 outside rooms

    def __post_init__(self):
        if self.room_id_grid is None:
            grid = np.full((self.height, self.width), -1, dtype=np.int16)
            for room in self.rooms:
                for x, y in room.cells:
                    grid[y, x] = room.id
            self.room_id_grid = grid

    def free_mask(self) -> np.ndarray:
        """Boolean (H, W) mask of traversable room cells."""
        return self.cells < N_ROOM_CATEGORIES

    def room_at(self, cell: tuple[int, int]) -> RoomRegion | None:
        rid = int(self.room_id_grid[cell[1], cell[0]])
        return self.rooms[rid] if rid >= 0 else None


@dataclass(frozen=True)
class PriorTable:
    """Object-room co-occurrence priors over the environment taxonomy."""

    labels: tuple[str, ...]
    objects: tuple[str, ...]
    p_obj_given_room: np.ndarray  # (R, K) row-stochastic
    room_freq: np.ndarray  # (R,) sums to 1
    p_room_given_obj: np.ndarray  # (K, R) row-stochastic

    def validate(self) -> None:
        R, K = len(self.labels), len(self.objects)
        assert self.p_obj_given_room.shape == (R, K)
        assert self.p_room_given_obj.shape == (K, R)
        if np.any(self.p_obj_given_room < 0) or np.any(self.p_room_given_obj < 0):
            raise ValueError("prior entries must be nonnegative")
        if not np.allclose(self.p_obj_given_room.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("p_obj_given_room rows must sum to 1")
        if not np.allclose(self.p_room_given_obj.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("p_room_given_obj rows must sum to 1")


def make_prior_table(
    p_obj_given_room: np.ndarray,
    room_freq: np.ndarray,
    labels: tuple[str, ...] = ENV_CLASSES,
    objects: tuple[str, ...] = OBJECT_VOCAB,
) -> PriorTable:
    """Build a PriorTable, deriving P(room|object) by Bayes inversion."""
    p = np.asarray(p_obj_given_room, dtype=np.float64)
    freq = np.asarray(room_freq, dtype=np.float64)
    freq = freq / freq.sum()
    joint = p * freq[:, None]  # (R, K)
    col = joint.sum(axis=0)
    if np.any(col <= 0):
        raise ValueError("every object needs nonzero mass in some room")
    p_room = (joint / col[None, :]).T  # (K, R)
    table = PriorTable(labels, objects, p, freq, p_room)
    table.validate()
    return table


def build_default_priors(signature_mass: float = 0.8) -> PriorTable:
    """Default priors: each class concentrates mass on its signature objects."""
    R, K = N_ENV_CLASSES, N_OBJECTS
    p = np.full((R, K), (1.0 - signature_mass) / K, dtype=np.float64)
    obj_index = {name: i for i, name in enumerate(OBJECT_VOCAB)}
    for r, label in enumerate(ENV_CLASSES):
        sig = [obj_index[name] for name in _SIGNATURES[label]]
        for k in sig:
            p[r, k] += signature_mass / len(sig)
    freq = np.array([_ROOM_WEIGHTS[label] for label in ENV_CLASSES])
    return make_prior_table(p, freq)


def save_priors_text(table: PriorTable) -> str:
    """Serialize a PriorTable to the eamnav-priors/1 text format."""
    lines = ["eamnav-priors/1", f"classes {len(table.labels)}", f"objects {len(table.objects)}"]
    for label, freq in zip(table.labels, table.room_freq):
        lines.append(f"class {label} {freq:.9f}")
    for name in table.objects:
        lines.append(f"object {name}")
    for r, label in enumerate(table.labels):
        row = " ".join(f"{v:.9f}" for v in table.p_obj_given_room[r])
        lines.append(f"row {label} {row}")
    return "\n".join(lines) + "\n"


def load_priors_text(text: str) -> PriorTable:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "eamnav-priors/1":
        raise ValueError("not an eamnav-priors/1 file")
    n_classes = int(lines[1].split()[1])
    n_objects = int(lines[2].split()[1])
    pos = 3
    labels, freqs = [], []
    for _ in range(n_classes):
        _, label, freq = lines[pos].split()
        labels.append(label)
        freqs.append(float(freq))
        pos += 1
    objects = []
    for _ in range(n_objects):
        objects.append(lines[pos].split()[1])
        pos += 1
    p = np.zeros((n_classes, n_objects))
    for r in range(n_classes):
        parts = lines[pos].split()
        if parts[1] != labels[r]:
            raise ValueError(f"row label mismatch: {parts[1]} != {labels[r]}")
        p[r] = [float(v) for v in parts[2:]]
        pos += 1
    # renormalize rows against text truncation
    p = p / p.sum(axis=1, keepdims=True)
    return make_prior_table(p, np.array(freqs), tuple(labels), tuple(objects))


def default_priors() -> PriorTable:
    """Load the shipped default prior table."""
    text = importlib.resources.files("eamnav.data").joinpath("default_priors.txt").read_text()
    return load_priors_text(text)


@dataclass(frozen=True)
class GenConfig:
    width: int = 48
    height: int = 48
    rooms_min: int = 4
    rooms_max: int = 8
    min_room_dim: int = 5
    corridor_prob: float = 0.6
    bathroom_adjacency_prob: float = 0.8
    extra_door_prob: float = 0.25

    def validate(self) -> None:
        if self.width < 24 or self.height < 24:
            raise GenerationError("world dimensions must be at least 24x24")
        if self.rooms_min > self.rooms_max or self.rooms_min < 1:
            raise GenerationError("invalid room count range")
        if self.min_room_dim < 3:
            raise GenerationError("min_room_dim must be at least 3")
        interior = (self.width - 4) * (self.height - 4)
        if self.rooms_min * (self.min_room_dim + 1) ** 2 > interior:
            raise GenerationError("interior too small for requested room count")


@dataclass
class _Leaf:
    x0: int
    y0: int
    x1: int  # inclusive
    y1: int

    @property
    def w(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def h(self) -> int:
        return self.y1 - self.y0 + 1

    @property
    def area(self) -> int:
        return self.w * self.h


def _split_leaves(interior: _Leaf, target: int, min_dim: int, rng: np.random.Generator) -> list[_Leaf]:
    leaves = [interior]
    while len(leaves) < target:
        candidates = [
            (i, lf) for i, lf in enumerate(leaves)
            if lf.w >= 2 * min_dim + 1 or lf.h >= 2 * min_dim + 1
        ]
        if not candidates:
            break
        # split the largest splittable leaf
        i, leaf = max(candidates, key=lambda c: c[1].area)
        can_v = leaf.w >= 2 * min_dim + 1
        can_h = leaf.h >= 2 * min_dim + 1
        if can_v and can_h:
            vertical = bool(rng.random() < (leaf.w / (leaf.w + leaf.h)))
        else:
            vertical = can_v
        if vertical:
            cut = int(rng.integers(leaf.x0 + min_dim, leaf.x1 - min_dim + 1))
            a = _Leaf(leaf.x0, leaf.y0, cut - 1, leaf.y1)
            b = _Leaf(cut + 1, leaf.y0, leaf.x1, leaf.y1)
        else:
            cut = int(rng.integers(leaf.y0 + min_dim, leaf.y1 - min_dim + 1))
            a = _Leaf(leaf.x0, leaf.y0, leaf.x1, cut - 1)
            b = _Leaf(leaf.x0, cut + 1, leaf.x1, leaf.y1)
        leaves[i] = a
        leaves.append(b)
    return leaves


def _leaf_adjacencies(leaves: list[_Leaf]) -> dict[tuple[int, int], list[tuple[int, int]]]:
    """Map (i, j) leaf pairs to candidate door cells on their shared wall line."""
    adj: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for i, a in enumerate(leaves):
        for j, b in enumerate(leaves):
            if j <= i:
                continue
            cells: list[tuple[int, int]] = []
            if b.x0 - a.x1 == 2:  # b right of a, wall column at a.x1+1
                y_lo, y_hi = max(a.y0, b.y0), min(a.y1, b.y1)
                cells = [(a.x1 + 1, y) for y in range(y_lo, y_hi + 1)]
            elif a.x0 - b.x1 == 2:
                y_lo, y_hi = max(a.y0, b.y0), min(a.y1, b.y1)
                cells = [(b.x1 + 1, y) for y in range(y_lo, y_hi + 1)]
            elif b.y0 - a.y1 == 2:
                x_lo, x_hi = max(a.x0, b.x0), min(a.x1, b.x1)
                cells = [(x, a.y1 + 1) for x in range(x_lo, x_hi + 1)]
            elif a.y0 - b.y1 == 2:
                x_lo, x_hi = max(a.x0, b.x0), min(a.x1, b.x1)
                cells = [(x, b.y1 + 1) for x in range(x_lo, x_hi + 1)]
            if cells:
                adj[(i, j)] = cells
    return adj


def _assign_categories(
    leaves: list[_Leaf],
    adjacency: dict[tuple[int, int], list[tuple[int, int]]],
    cfg: GenConfig,
    rng: np.random.Generator,
) -> list[int]:
    n = len(leaves)
    name_to_id = {label: i for i, label in enumerate(ENV_CLASSES)}
    cats = [-1] * n
    order = list(np.argsort([-lf.area for lf in leaves], kind="stable"))
    degree = [0] * n
    for (i, j) in adjacency:
        degree[i] += 1
        degree[j] += 1

    cats[order[0]] = name_to_id["livingroom"]
    unassigned = [i for i in order[1:]]

    if unassigned and rng.random() < cfg.corridor_prob:
        hub = max(unassigned, key=lambda i: degree[i])
        cats[hub] = name_to_id["corridor"]
        unassigned.remove(hub)
    if unassigned:
        k = unassigned[int(rng.integers(len(unassigned)))]
        cats[k] = name_to_id["kitchen"]
        unassigned.remove(k)
    if unassigned:
        b = unassigned[int(rng.integers(len(unassigned)))]
        cats[b] = name_to_id["bedroom"]
        unassigned.remove(b)
    if unassigned:
        # bathroom prefers a leaf adjacent to a bedroom or corridor
        want = {name_to_id["bedroom"], name_to_id["corridor"]}
        neighbours = {i: set() for i in range(n)}
        for (i, j) in adjacency:
            neighbours[i].add(j)
            neighbours[j].add(i)
        preferred = [
            i for i in unassigned
            if any(cats[nb] in want for nb in neighbours[i])
        ]
        if preferred and rng.random() < cfg.bathroom_adjacency_prob:
            b = preferred[int(rng.integers(len(preferred)))]
        else:
            b = unassigned[int(rng.integers(len(unassigned)))]
        cats[b] = name_to_id["bathroom"]
        unassigned.remove(b)

    weights = np.array([_ROOM_WEIGHTS[ENV_CLASSES[i]] for i in range(N_ROOM_CATEGORIES)])
    weights = weights / weights.sum()
    for i in unassigned:
        cats[i] = int(rng.choice(N_ROOM_CATEGORIES, p=weights))
    return cats


def generate_floor_plan(config: GenConfig, seed: int) -> FloorPlan:
    """Generate a floor plan: outside margin, wall ring, BSP rooms, doorways.

    Deterministic in (config, seed). Raises GenerationError on an invalid or
    unsatisfiable configuration.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    w, h = config.width, config.height

    cells = np.full((h, w), OUTSIDE, dtype=np.uint8)
    cells[1:h - 1, 1:w - 1] = WALL

    interior = _Leaf(2, 2, w - 3, h - 3)
    target = int(rng.integers(config.rooms_min, config.rooms_max + 1))
    leaves = _split_leaves(interior, target, config.min_room_dim, rng)
    if len(leaves) < config.rooms_min:
        raise GenerationError("could not reach requested minimum room count")

    adjacency = _leaf_adjacencies(leaves)
    cats = _assign_categories(leaves, adjacency, config, rng)

    room_cells: list[list[tuple[int, int]]] = [[] for _ in leaves]
    for i, lf in enumerate(leaves):
        for y in range(lf.y0, lf.y1 + 1):
            for x in range(lf.x0, lf.x1 + 1):
                cells[y, x] = cats[i]
                room_cells[i].append((x, y))

    # doorways: spanning tree over leaf adjacency plus extra doors
    pairs = sorted(adjacency.keys())
    rng.shuffle(pairs)
    parent = list(range(len(leaves)))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for (i, j) in pairs:
        extra = rng.random() < config.extra_door_prob
        ri, rj = find(i), find(j)
        if ri == rj and not extra:
            continue
        parent[ri] = rj
        slots = adjacency[(i, j)]
        door = slots[int(rng.integers(len(slots)))]
        cells[door[1], door[0]] = cats[i]  # door cell joins room i
        room_cells[i].append(door)

    rooms = [
        RoomRegion(i, cats[i], tuple(sorted(room_cells[i])))
        for i in range(len(leaves))
    ]
    return FloorPlan(w, h, cells, rooms, [], seed)


def place_objects(plan: FloorPlan, priors: PriorTable, density: int, seed: int) -> FloorPlan:
    """Place `density` objects per room, classes drawn from the room's prior row.

    Rooms smaller than `density` receive as many objects as they have free
    cells. Returns a new FloorPlan; the input is untouched.
    """
    if density < 1:
        raise ValueError("density must be >= 1")
    rng = np.random.default_rng(seed)
    K = len(priors.objects)
    objects: list[ObjectInstance] = []
    for room in plan.rooms:
        n = min(density, len(room.cells))
        idx = rng.choice(len(room.cells), size=n, replace=False)
        row = priors.p_obj_given_room[room.category]
        classes = rng.choice(K, size=n, p=row)
        for pos, cls in zip(idx, classes):
            objects.append(ObjectInstance(int(cls), room.cells[int(pos)], room.id))
    return replace(plan, objects=objects, room_id_grid=plan.room_id_grid)


def rasterize_categories(plan: FloorPlan, resolution: int | tuple[int, int]) -> np.ndarray:
    """One-hot (C, H', W') float32 tensor via nearest-neighbor downsampling.

    Source index for output row i is floor((i + 0.5) * H / H').
    """
    if isinstance(resolution, int):
        out_h = out_w = resolution
    else:
        out_h, out_w = resolution
    ys = np.floor((np.arange(out_h) + 0.5) * plan.height / out_h).astype(int)
    xs = np.floor((np.arange(out_w) + 0.5) * plan.width / out_w).astype(int)
    picked = plan.cells[np.ix_(ys, xs)]
    tensor = np.zeros((N_CELL_CATEGORIES, out_h, out_w), dtype=np.float32)
    for c in range(N_CELL_CATEGORIES):
        tensor[c] = picked == c
    return tensor


def validate_plan(plan: FloorPlan) -> None:
    """Assert the structural invariants every generated plan must satisfy."""
    floor = plan.cells < N_ROOM_CATEGORIES
    counts = np.zeros((plan.height, plan.width), dtype=int)
    for room in plan.rooms:
        assert len(room.cells) > 0
        assert 0 <= room.category < N_ENV_CLASSES
        for x, y in room.cells:
            counts[y, x] += 1
        # 4-connectivity of the region
        cell_set = set(room.cells)
        seen = {room.cells[0]}
        stack = [room.cells[0]]
        while stack:
            cx, cy = stack.pop()
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nb = (cx + dx, cy + dy)
                if nb in cell_set and nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        assert len(seen) == len(cell_set), f"room {room.id} not 4-connected"
    assert np.array_equal(counts > 0, floor), "floor cells must be covered by rooms"
    assert counts.max() <= 1, "rooms must not overlap"
    occupied = set()
    for obj in plan.objects:
        assert 0 <= obj.class_id < N_OBJECTS
        assert floor[obj.cell[1], obj.cell[0]], "object on non-room cell"
        assert obj.cell not in occupied, "two objects on one cell"
        occupied.add(obj.cell)
        assert 0 <= obj.room_id < len(plan.rooms)


# -- world file format (eamnav-world/1) --------------------------------------

def save_world_text(plan: FloorPlan) -> str:
    lines = [
        "eamnav-world/1",
        f"seed {plan.seed}",
        f"size {plan.width} {plan.height}",
        "cells",
    ]
    for y in range(plan.height):
        lines.append(" ".join(str(int(v)) for v in plan.cells[y]))
    lines.append("roomgrid")
    for y in range(plan.height):
        lines.append(" ".join(str(int(v)) for v in plan.room_id_grid[y]))
    lines.append(f"rooms {len(plan.rooms)}")
    for room in plan.rooms:
        lines.append(f"room {room.id} {room.label}")
    lines.append(f"objects {len(plan.objects)}")
    for obj in plan.objects:
        lines.append(f"object {obj.class_id} {obj.cell[0]} {obj.cell[1]} {obj.room_id}")
    return "\n".join(lines) + "\n"


def load_world_text(text: str) -> FloorPlan:
    lines = text.splitlines()
    if not lines or lines[0] != "eamnav-world/1":
        raise ValueError("not an eamnav-world/1 file")
    seed = int(lines[1].split()[1])
    w, h = (int(v) for v in lines[2].split()[1:3])
    if lines[3] != "cells":
        raise ValueError("malformed world file: missing cells section")
    cells = np.array(
        [[int(v) for v in lines[4 + y].split()] for y in range(h)], dtype=np.uint8
    )
    pos = 4 + h
    if lines[pos] != "roomgrid":
        raise ValueError("malformed world file: missing roomgrid section")
    room_grid = np.array(
        [[int(v) for v in lines[pos + 1 + y].split()] for y in range(h)], dtype=np.int16
    )
    pos += 1 + h
    n_rooms = int(lines[pos].split()[1])
    pos += 1
    label_to_id = {label: i for i, label in enumerate(ENV_CLASSES)}
    room_cells: list[list[tuple[int, int]]] = [[] for _ in range(n_rooms)]
    for y in range(h):
        for x in range(w):
            rid = int(room_grid[y, x])
            if rid >= 0:
                room_cells[rid].append((x, y))
    rooms = []
    for i in range(n_rooms):
        parts = lines[pos].split()
        rooms.append(RoomRegion(int(parts[1]), label_to_id[parts[2]], tuple(sorted(room_cells[i]))))
        pos += 1
    n_objects = int(lines[pos].split()[1])
    pos += 1
    objects = []
    for _ in range(n_objects):
        parts = lines[pos].split()
        objects.append(ObjectInstance(int(parts[1]), (int(parts[2]), int(parts[3])), int(parts[4])))
        pos += 1
    return FloorPlan(w, h, cells, rooms, objects, seed, room_id_grid=room_grid)


def save_world(plan: FloorPlan, path) -> None:
    with open(path, "w") as f:
        f.write(save_world_text(plan))


def load_world(path) -> FloorPlan:
    with open(path) as f:
        return load_world_text(f.read())
