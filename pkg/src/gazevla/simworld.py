"""Deterministic toy tabletop world: scenes, rendering, dynamics, scripted expert.

Coordinate conventions
----------------------
World coordinates live in [0,1]^2 with x to the right and y DOWN, matching
raster orientation. The base camera sees the whole table at 64x64; the wrist
camera is a 2x zoom centered on the gripper. World -> pixel mapping is
``px = floor((p - origin) * scale)`` with origin at the window's top-left
corner (base view: origin (0,0), scale 64).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .common import mix64

RASTER = 64
MAX_STEP = 0.08          # world units moved per unit action component
GRASP_RADIUS = 0.05
PLACE_RADIUS = 0.05
MIN_SPACING = 0.16       # pairwise object distance at creation
PLACE_MARGIN = 0.12      # keep objects away from table edges
GAZE_DILATION = 4        # pixels added around an object's extent
NEAR_EPS = 0.02          # expert: distance at which it commits to grasping
RELEASE_EPS = 0.04       # expert: distance at which it releases onto the goal

KINDS = ("block", "bowl", "cup")
COLORS = ("red", "green", "blue", "yellow", "orange", "purple", "pink", "cyan")
COLOR_RGB = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 90, 220),
    "yellow": (235, 200, 40),
    "orange": (240, 130, 30),
    "purple": (150, 60, 200),
    "pink": (240, 120, 190),
    "cyan": (60, 200, 210),
}

ENV_IDS = ("A", "B", "C", "D")
# Each env differs only in background palette and which 6 of the 8 colors its
# objects can take. Layout draws never depend on env, so a fixed seed yields
# the same geometry in every env.
ENV_PALETTES = {
    "A": {"bg": (190, 176, 150), "trim": (124, 112, 92)},
    "B": {"bg": (152, 170, 186), "trim": (96, 112, 128)},
    "C": {"bg": (168, 186, 152), "trim": (104, 122, 92)},
    "D": {"bg": (108, 96, 128), "trim": (66, 58, 82)},
}
ENV_COLOR_POOLS = {
    "A": ("red", "green", "blue", "yellow", "orange", "purple"),
    "B": ("red", "green", "blue", "yellow", "pink", "cyan"),
    "C": ("red", "green", "blue", "purple", "pink", "cyan"),
    "D": ("red", "blue", "yellow", "purple", "pink", "cyan"),
}
VOID_RGB = (12, 12, 12)
GRIPPER_UP_RGB = (250, 250, 250)
GRIPPER_DOWN_RGB = (35, 35, 35)

VERBS = ("pick_place", "stack", "flip")
PHASES = ("reach_target", "transport_to_destination", "done")


class InfeasibleChain(Exception):
    """The object pool cannot support the requested subtask chain."""


class ObjectOccluded(Exception):
    """The gaze target projects to zero pixels in the requested view."""


@dataclass(frozen=True)
class Obj:
    id: int
    kind: str
    color: str
    position: tuple[float, float]
    held: bool = False
    flipped: bool = False  # cups only; toggled by releasing with z up


@dataclass(frozen=True)
class Gripper:
    position: tuple[float, float]
    z: str = "up"  # "up" | "down"
    closed: bool = False


@dataclass(frozen=True)
class WorldState:
    objects: tuple[Obj, ...]
    gripper: Gripper
    env_id: str
    rng_seed: int
    step_count: int = 0
    clamp_warnings: int = 0

    def obj(self, obj_id: int) -> Obj:
        for o in self.objects:
            if o.id == obj_id:
                return o
        raise KeyError(f"no object with id {obj_id}")

    def held_object(self) -> Optional[Obj]:
        for o in self.objects:
            if o.held:
                return o
        return None


@dataclass(frozen=True)
class Subtask:
    verb: str
    target_id: int
    destination_id: Optional[int] = None
    phase: str = "reach_target"

    def __post_init__(self):
        if self.verb not in VERBS:
            raise ValueError(f"unknown verb {self.verb!r}")
        if self.verb in ("pick_place", "stack") and self.destination_id is None:
            raise ValueError(f"{self.verb} requires a destination")
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")


@dataclass(frozen=True)
class ContinuousAction:
    """4-D command: planar delta, vertical set-point, grip intent.

    All components live in [-1,1]. ``z_toggle`` > 0.5 commands z up,
    < -0.5 commands z down, otherwise z is left alone. ``grip`` > 0.5 means
    "be closed", < -0.5 means "be open", the middle band keeps the current
    grip state, so commands act like set-points rather than one-shot events.
    """

    dx: float = 0.0
    dy: float = 0.0
    z_toggle: float = 0.0
    grip: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.z_toggle, self.grip], dtype=np.float64)

    @staticmethod
    def from_vector(v) -> "ContinuousAction":
        v = np.asarray(v, dtype=np.float64).reshape(4)
        return ContinuousAction(float(v[0]), float(v[1]), float(v[2]), float(v[3]))


ACTION_DIM = 4


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (0 <= self.x_min < self.x_max <= RASTER and 0 <= self.y_min < self.y_max <= RASTER):
            raise ValueError(f"degenerate bbox {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


# ---------------------------------------------------------------------------
# world creation


def create_world(seed: int, env_id: str) -> WorldState:
    """Place 4-7 non-overlapping objects; bit-identical for a fixed (seed, env).

    Env only selects the color pool and palette; geometry depends on the seed
    alone, so (seed, A) and (seed, D) share the same layout.
    """
    if env_id not in ENV_IDS:
        raise ValueError(f"env_id must be one of {ENV_IDS}, got {env_id!r}")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 8))

    # Kinds: blocks are the workhorse; keep per-kind counts <= pool size so
    # (kind, color) pairs can stay unique and language references unambiguous.
    while True:
        kinds = [KINDS[i] for i in rng.choice(3, size=n, p=[0.5, 0.25, 0.25])]
        if max(kinds.count(k) for k in KINDS) <= 6:
            break

    pool = ENV_COLOR_POOLS[env_id]
    colors: list[str] = []
    used: dict[str, list[int]] = {k: [] for k in KINDS}
    for kind in kinds:
        free = [i for i in range(6) if i not in used[kind]]
        idx = int(free[rng.integers(0, len(free))])
        used[kind].append(idx)
        colors.append(pool[idx])

    positions: list[tuple[float, float]] = []
    attempts = 0
    while len(positions) < n:
        attempts += 1
        if attempts > 1000:
            raise RuntimeError("object placement failed after 1000 attempts (configuration bug)")
        p = (
            float(rng.uniform(PLACE_MARGIN, 1.0 - PLACE_MARGIN)),
            float(rng.uniform(PLACE_MARGIN, 1.0 - PLACE_MARGIN)),
        )
        if all(math.hypot(p[0] - q[0], p[1] - q[1]) >= MIN_SPACING for q in positions):
            positions.append(p)

    gx = float(rng.uniform(0.2, 0.8))
    gy = float(rng.uniform(0.2, 0.8))

    objects = tuple(
        Obj(id=i, kind=kinds[i], color=colors[i], position=positions[i]) for i in range(n)
    )
    return WorldState(
        objects=objects,
        gripper=Gripper(position=(gx, gy)),
        env_id=env_id,
        rng_seed=int(seed),
    )


# ---------------------------------------------------------------------------
# dynamics


def _clamp(v: float, lo: float = -1.0, hi: float = 1.0) -> float:
    return lo if v < lo else hi if v > hi else v


def step(world: WorldState, action: ContinuousAction) -> WorldState:
    """Advance one tick. Out-of-range components are clamped (warning counted).

    Order within a tick: move, set z, apply grip intent. Attachment happens
    whenever the gripper ends the tick closed with z down near a free object,
    so an early "close" command latches on arrival.
    """
    raw = (action.dx, action.dy, action.z_toggle, action.grip)
    clamped = tuple(_clamp(v) for v in raw)
    warn = world.clamp_warnings + (1 if any(abs(r) > 1.0 for r in raw) else 0)
    dx, dy, zt, grip = clamped

    g = world.gripper
    nx = min(1.0, max(0.0, g.position[0] + dx * MAX_STEP))
    ny = min(1.0, max(0.0, g.position[1] + dy * MAX_STEP))
    z = "up" if zt > 0.5 else "down" if zt < -0.5 else g.z
    closed = True if grip > 0.5 else False if grip < -0.5 else g.closed

    objects = list(world.objects)
    held_idx = next((i for i, o in enumerate(objects) if o.held), None)

    # held object tracks the gripper
    if held_idx is not None:
        objects[held_idx] = replace(objects[held_idx], position=(nx, ny))

    if not closed and held_idx is not None:
        o = objects[held_idx]
        flipped = (not o.flipped) if (z == "up" and o.kind == "cup") else o.flipped
        objects[held_idx] = replace(o, held=False, flipped=flipped)
        held_idx = None

    if closed and held_idx is None and z == "down":
        best, best_d = None, GRASP_RADIUS
        for i, o in enumerate(objects):
            d = math.hypot(o.position[0] - nx, o.position[1] - ny)
            if d <= best_d and (best is None or d < best_d):
                best, best_d = i, d
        if best is not None:
            objects[best] = replace(objects[best], held=True, position=(nx, ny))

    return replace(
        world,
        objects=tuple(objects),
        gripper=Gripper(position=(nx, ny), z=z, closed=closed),
        step_count=world.step_count + 1,
        clamp_warnings=warn,
    )


# ---------------------------------------------------------------------------
# rendering

_YY, _XX = np.mgrid[0:RASTER, 0:RASTER]


def _world_to_px(p: tuple[float, float], scale: float, origin: tuple[float, float]) -> tuple[int, int]:
    return (
        int(math.floor((p[0] - origin[0]) * scale)),
        int(math.floor((p[1] - origin[1]) * scale)),
    )


def _paint_rect(img, x0, y0, x1, y1, rgb):
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(RASTER, x1), min(RASTER, y1)
    if x0 < x1 and y0 < y1:
        img[y0:y1, x0:x1] = rgb


def _draw_object(img, obj: Obj, cx: int, cy: int, zoom: int) -> None:
    rgb = COLOR_RGB[obj.color]
    if obj.kind == "block":
        h = 3 * zoom
        _paint_rect(img, cx - h, cy - h, cx + h + 1, cy + h + 1, rgb)
    elif obj.kind == "bowl":
        r = 4 * zoom
        mask = (_XX - cx) ** 2 + (_YY - cy) ** 2 <= r * r
        img[mask] = rgb
        r_in = 2 * zoom
        inner = (_XX - cx) ** 2 + (_YY - cy) ** 2 <= r_in * r_in
        img[inner] = tuple(int(c * 0.55) for c in rgb)
    else:  # cup: triangle, apex up; flipped renders apex down
        h = 3 * zoom
        if obj.flipped:
            mask = (np.abs(_XX - cx) * 2 <= (cy + h) - _YY) & (_YY >= cy - h) & (_YY <= cy + h)
        else:
            mask = (np.abs(_XX - cx) * 2 <= _YY - (cy - h)) & (_YY >= cy - h) & (_YY <= cy + h)
        img[mask] = rgb


def _draw_gripper(img, g: Gripper, cx: int, cy: int, zoom: int) -> None:
    rgb = GRIPPER_UP_RGB if g.z == "up" else GRIPPER_DOWN_RGB
    arm = 4 * zoom
    t = zoom - 1
    horiz = (np.abs(_XX - cx) <= arm) & (np.abs(_YY - cy) <= t)
    vert = (np.abs(_YY - cy) <= arm) & (np.abs(_XX - cx) <= t)
    hole = (np.abs(_XX - cx) <= zoom) & (np.abs(_YY - cy) <= zoom)
    img[(horiz | vert) & ~hole] = rgb
    if g.closed:
        img[hole] = rgb


def _view_params(world: WorldState, view: str) -> tuple[float, tuple[float, float], int]:
    if view == "base":
        return float(RASTER), (0.0, 0.0), 1
    if view == "wrist":
        gx, gy = world.gripper.position
        return float(2 * RASTER), (gx - 0.25, gy - 0.25), 2
    raise ValueError(f"view must be 'base' or 'wrist', got {view!r}")


def render(world: WorldState, view: str = "base") -> np.ndarray:
    """Flat-shaded 64x64x3 uint8 rasterization; deterministic."""
    scale, origin, zoom = _view_params(world, view)
    pal = ENV_PALETTES[world.env_id]
    img = np.empty((RASTER, RASTER, 3), dtype=np.uint8)
    img[:, :] = VOID_RGB

    tx0, ty0 = _world_to_px((0.0, 0.0), scale, origin)
    tx1, ty1 = _world_to_px((1.0, 1.0), scale, origin)
    _paint_rect(img, tx0, ty0, tx1, ty1, pal["trim"])
    b = 2 * zoom
    _paint_rect(img, tx0 + b, ty0 + b, tx1 - b, ty1 - b, pal["bg"])

    for obj in world.objects:
        cx, cy = _world_to_px(obj.position, scale, origin)
        _draw_object(img, obj, cx, cy, zoom)

    gx, gy = _world_to_px(world.gripper.position, scale, origin)
    _draw_gripper(img, world.gripper, gx, gy, zoom)
    return img


_EXTENT_BY_KIND = {"block": 3, "bowl": 4, "cup": 3}


def object_pixel_box(world: WorldState, obj_id: int, view: str) -> Optional[BBox]:
    """Un-dilated pixel extent of an object in the given view; None if off-screen."""
    scale, origin, zoom = _view_params(world, view)
    obj = world.obj(obj_id)
    cx, cy = _world_to_px(obj.position, scale, origin)
    h = _EXTENT_BY_KIND[obj.kind] * zoom
    x0, y0 = max(0, cx - h), max(0, cy - h)
    x1, y1 = min(RASTER, cx + h + 1), min(RASTER, cy + h + 1)
    if x0 >= x1 or y0 >= y1:
        return None
    return BBox(x0, y0, x1, y1)


# ---------------------------------------------------------------------------
# tasks


def sample_task_chain(seed: int, world: WorldState, length: int = 5) -> list[Subtask]:
    """Chain of subtasks feasible in order, with every check still passing in
    the final world: targets are distinct and destinations are never moved.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if length > len(world.objects):
        raise InfeasibleChain(
            f"need {length} distinct targets but world has {len(world.objects)} objects"
        )
    rng = np.random.default_rng(mix64(seed, 0x7A5C))
    by_id = {o.id: o for o in world.objects}
    ids = sorted(by_id)

    for _ in range(100):
        perm = [ids[i] for i in rng.permutation(len(ids))]
        targets, statics = perm[:length], set(perm[length:])
        static_blocks = [i for i in statics if by_id[i].kind == "block"]
        static_vessels = [i for i in statics if by_id[i].kind in ("bowl", "cup")]
        chain: list[Subtask] = []
        ok = True
        for t in targets:
            kind = by_id[t].kind
            options: list[tuple[str, Optional[int]]] = []
            if kind == "block":
                options += [("stack", d) for d in static_blocks]
                options += [("pick_place", d) for d in static_vessels]
            elif kind == "cup":
                options.append(("flip", None))
                options += [("pick_place", d) for d in static_vessels if d != t]
            else:  # bowl
                options += [("pick_place", d) for d in static_vessels if d != t]
            if not options:
                ok = False
                break
            verb, dest = options[int(rng.integers(0, len(options)))]
            chain.append(Subtask(verb=verb, target_id=t, destination_id=dest))
        if ok:
            return chain
    raise InfeasibleChain("no feasible chain found for this object pool")


def make_feasible_task(seed: int, env_id: str, length: int = 5) -> tuple[WorldState, list[Subtask]]:
    """Deterministically derive a (world, chain) pair, retrying derived seeds
    until the sampled world supports the chain length."""
    for attempt in range(64):
        ws = mix64(seed, ord(env_id), attempt)
        world = create_world(ws, env_id)
        try:
            return world, sample_task_chain(ws, world, length)
        except InfeasibleChain:
            continue
    raise InfeasibleChain(f"no feasible world after 64 attempts (seed={seed}, env={env_id})")


def advance_subtask(world: WorldState, subtask: Subtask) -> Subtask:
    """Phase bookkeeping used by rollout drivers; monotone reach->transport->done."""
    if subtask.phase == "done":
        return subtask
    if check_success(world, subtask):
        return replace(subtask, phase="done")
    if subtask.phase == "reach_target" and world.obj(subtask.target_id).held:
        return replace(subtask, phase="transport_to_destination")
    return subtask


def check_success(world: WorldState, subtask: Subtask) -> bool:
    t = world.obj(subtask.target_id)
    if subtask.verb == "flip":
        return t.flipped and not t.held
    d = world.obj(subtask.destination_id)
    dist = math.hypot(t.position[0] - d.position[0], t.position[1] - d.position[1])
    return dist <= PLACE_RADIUS and not t.held


def expert_action(world: WorldState, subtask: Subtask) -> ContinuousAction:
    """Proportional controller toward the current phase goal.

    Travels with z up / grip matching the carry state, then commits with a
    single combined (descend, grip) command near the goal. All outputs are
    already within [-1,1].
    """
    if subtask.phase == "done":
        return ContinuousAction()
    g = world.gripper.position
    target = world.obj(subtask.target_id)

    def drive(goal: tuple[float, float]) -> tuple[float, float, float]:
        dx, dy = goal[0] - g[0], goal[1] - g[1]
        return _clamp(dx / MAX_STEP), _clamp(dy / MAX_STEP), math.hypot(dx, dy)

    holding_target = target.held
    if subtask.phase == "reach_target" and not holding_target:
        dx, dy, dist = drive(target.position)
        if dist > NEAR_EPS:
            return ContinuousAction(dx, dy, z_toggle=1.0, grip=-1.0)
        return ContinuousAction(dx, dy, z_toggle=-1.0, grip=1.0)

    # transport (or defensive: target already held during reach phase)
    if subtask.verb == "flip":
        if world.gripper.z == "down":
            return ContinuousAction(0.0, 0.0, z_toggle=1.0, grip=1.0)
        return ContinuousAction(0.0, 0.0, z_toggle=0.0, grip=-1.0)
    dest = world.obj(subtask.destination_id)
    dx, dy, dist = drive(dest.position)
    if dist > RELEASE_EPS:
        return ContinuousAction(dx, dy, z_toggle=1.0, grip=1.0)
    return ContinuousAction(dx, dy, z_toggle=-1.0, grip=-1.0)


def gaze_bbox(world: WorldState, subtask: Subtask, view: str = "base") -> BBox:
    """Pixel box of the current object of interest, dilated by 4 px.

    Reach phase looks at the target; transport looks at the destination
    (the target itself for flips, which have no destination object).
    """
    if subtask.phase == "done":
        raise ValueError("gaze_bbox undefined for completed subtasks")
    if subtask.phase == "reach_target" or subtask.destination_id is None:
        focus = subtask.target_id
    else:
        focus = subtask.destination_id
    raw = object_pixel_box(world, focus, view)
    if raw is None:
        raise ObjectOccluded(f"object {focus} projects to zero pixels in {view} view")
    return BBox(
        max(0, raw.x_min - GAZE_DILATION),
        max(0, raw.y_min - GAZE_DILATION),
        min(RASTER, raw.x_max + GAZE_DILATION),
        min(RASTER, raw.y_max + GAZE_DILATION),
    )


def rollout_expert(
    world: WorldState,
    chain: list[Subtask],
    max_steps_per_subtask: int = 60,
    on_frame: Optional[Callable[[WorldState, Subtask, int], None]] = None,
) -> tuple[WorldState, list[bool]]:
    """Closed-loop scripted-expert execution; returns final world + per-subtask success."""
    results: list[bool] = []
    for idx, subtask in enumerate(chain):
        subtask = advance_subtask(world, subtask)
        steps = 0
        while subtask.phase != "done" and steps < max_steps_per_subtask:
            if on_frame is not None:
                on_frame(world, subtask, idx)
            world = step(world, expert_action(world, subtask))
            subtask = advance_subtask(world, subtask)
            steps += 1
        results.append(subtask.phase == "done")
        if subtask.phase != "done":
            break
    return world, results


# ---------------------------------------------------------------------------
# language


def describe_subtask(world: WorldState, subtask: Subtask) -> str:
    t = world.obj(subtask.target_id)
    if subtask.verb == "flip":
        return f"flip the {t.color} cup"
    d = world.obj(subtask.destination_id)
    if subtask.verb == "stack":
        return f"stack the {t.color} block on the {d.color} block"
    return f"put the {t.color} {t.kind} into the {d.color} {d.kind}"


def instruction_for_chain(world: WorldState, chain: list[Subtask]) -> str:
    return " then ".join(describe_subtask(world, st) for st in chain)


TEMPLATE_WORDS = tuple(
    sorted(set(("put", "the", "into", "stack", "on", "flip", "then") + KINDS + COLORS))
)


def validate_world(world: WorldState) -> None:
    """Raise if any WorldState invariant is violated (used by property tests)."""
    ids = [o.id for o in world.objects]
    assert len(ids) == len(set(ids)), "duplicate object ids"
    held = [o for o in world.objects if o.held]
    assert len(held) <= 1, "more than one held object"
    if held:
        assert held[0].position == world.gripper.position, "held object detached from gripper"
    for o in world.objects:
        assert 0.0 <= o.position[0] <= 1.0 and 0.0 <= o.position[1] <= 1.0, "object left the table"
    gp = world.gripper.position
    assert 0.0 <= gp[0] <= 1.0 and 0.0 <= gp[1] <= 1.0, "gripper left the table"
