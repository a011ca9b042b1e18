"""Deterministic 1-D elastic-collision micro-world with ground-truth event logs.

A world is a handful of attributed point objects on a line segment. All
objects share the same mass, so a collision is an exact velocity swap; the
arena walls reflect. Object-object collisions are logged with the integer
step in which they happened, wall bounces are not logged. A counterfactual
run deletes one object before the first step and replays the same dynamics.

Because equal-mass swaps never let objects pass each other, the position
order fixed by the initial state is invariant; the simulator exploits this
and only ever checks position-adjacent pairs for contact.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

COLORS = ("gray", "red", "blue", "green", "brown", "cyan", "purple", "yellow")
SHAPES = ("cube", "sphere", "cylinder")
MATERIALS = ("rubber", "metal")

#: attribute triples must be unique per world, so this caps num_objects
ATTRIBUTE_SPACE = len(COLORS) * len(SHAPES) * len(MATERIALS)

#: gaps at or below this many arena units count as contact
CONTACT_EPS = 1e-9

_MAX_SUBSTEPS = 10_000

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ObjectSpec:
    """One point object: identity, display attributes, initial state."""

    id: int
    color: str
    shape: str
    material: str
    position0: float
    velocity0: float

    def descriptor(self) -> str:
        return f"{self.color} {self.material} {self.shape}"


@dataclass(frozen=True)
class WorldConfig:
    num_objects: int = 6
    horizon: int = 30          # number of unit-length time steps
    arena_length: float = 30.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_objects < 2:
            raise ConfigurationError("num_objects must be >= 2")
        if self.num_objects > ATTRIBUTE_SPACE:
            raise ConfigurationError(
                f"num_objects={self.num_objects} exceeds the "
                f"{ATTRIBUTE_SPACE} distinct attribute triples available"
            )
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if self.arena_length <= 0.0:
            raise ConfigurationError("arena_length must be positive")


@dataclass(frozen=True)
class CollisionEvent:
    """Objects a and b (ids, a < b) met during step `step`."""

    a: int
    b: int
    step: int

    def __post_init__(self) -> None:
        if not self.a < self.b:
            raise ValueError(f"event pair must satisfy a < b, got ({self.a}, {self.b})")
        if self.step < 0:
            raise ValueError("event step must be non-negative")


@dataclass(frozen=True)
class EventLog:
    events: tuple[CollisionEvent, ...]

    def __post_init__(self) -> None:
        keys = [(e.step, e.a, e.b) for e in self.events]
        if sorted(keys) != keys:
            raise ValueError("event log must be sorted by (step, a, b)")
        if len(set(keys)) != len(keys):
            raise ValueError("event log must not contain duplicate (a, b, step) triples")

    def pairs(self) -> frozenset[tuple[int, int]]:
        """The set of object pairs that ever collided, step ignored."""
        return frozenset((e.a, e.b) for e in self.events)

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class World:
    config: WorldConfig
    objects: tuple[ObjectSpec, ...]
    world_id: int = 0

    def object_by_id(self, object_id: int) -> ObjectSpec:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(f"no object with id {object_id}")

    def all_pairs(self) -> tuple[tuple[int, int], ...]:
        ids = sorted(o.id for o in self.objects)
        return tuple(itertools.combinations(ids, 2))


def generate_world(config: WorldConfig, rng: np.random.Generator | None = None) -> World:
    """Sample a world deterministically from `config.seed` (or a caller rng).

    Attribute triples are drawn without replacement, positions are spaced by
    rejection until no two objects start closer than a minimum gap, and a
    little over half the objects move while the rest start at rest so that
    collision chains are common.
    """
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n = config.num_objects

    triples = list(itertools.product(COLORS, SHAPES, MATERIALS))
    chosen = rng.choice(len(triples), size=n, replace=False)

    margin = 0.05 * config.arena_length
    span = config.arena_length - 2.0 * margin
    min_gap = span / (3.0 * n)
    for _ in range(500):
        xs = np.sort(margin + rng.random(n) * span)
        if n == 1 or np.min(np.diff(xs)) >= min_gap:
            break
    else:
        raise ConfigurationError(
            "could not place objects with the required spacing; "
            "arena_length is too small for num_objects"
        )
    perm = rng.permutation(n)

    moving = rng.random(n) < 0.55
    speeds = rng.uniform(0.6, 1.5, size=n)
    signs = rng.choice(np.array([-1.0, 1.0]), size=n)

    objects = []
    for i in range(n):
        color, shape, material = triples[int(chosen[i])]
        velocity = float(moving[i] * speeds[i] * signs[i])
        objects.append(
            ObjectSpec(
                id=i,
                color=color,
                shape=shape,
                material=material,
                position0=float(xs[perm[i]]),
                velocity0=velocity,
            )
        )
    return World(config=config, objects=tuple(objects))


def simulate(world: World, removed: int | None = None) -> EventLog:
    """Run the dynamics for `horizon` unit steps and log object collisions.

    With `removed` set, that object is deleted before step 0 (counterfactual
    run). Within each unit step the earliest contact is resolved first and
    the scan repeats, so several collisions may share one step index. Events
    landing exactly on a step boundary belong to the later step; the run
    covers times [0, horizon). Ties at equal contact time resolve pair
    collisions before wall bounces, then lowest id pair first.
    """
    log, _ = _run(world, removed)
    return log


def final_state(world: World, removed: int | None = None) -> dict[int, tuple[float, float]]:
    """Position and velocity per object id after the full horizon (diagnostic)."""
    _, state = _run(world, removed)
    return state


def _run(
    world: World, removed: int | None = None
) -> tuple[EventLog, dict[int, tuple[float, float]]]:
    if removed is not None:
        world.object_by_id(removed)  # raises KeyError for unknown ids
    objs = [o for o in world.objects if o.id != removed]
    order = sorted(range(len(objs)), key=lambda i: objs[i].position0)
    ids = [objs[i].id for i in order]
    x = [objs[i].position0 for i in order]
    v = [objs[i].velocity0 for i in order]
    n = len(x)
    length = world.config.arena_length

    logged: set[tuple[int, int, int]] = set()
    for step in range(world.config.horizon):
        remaining = 1.0
        for _guard in range(_MAX_SUBSTEPS):
            # earliest upcoming event: (tau, kind, key); pairs sort before walls
            best: tuple[float, int, tuple[int, ...]] | None = None
            for i in range(n - 1):
                closing = v[i] - v[i + 1]
                if closing <= 0.0:
                    continue
                gap = x[i + 1] - x[i]
                tau = 0.0 if gap <= CONTACT_EPS else gap / closing
                a, b = sorted((ids[i], ids[i + 1]))
                cand = (tau, 0, (a, b))
                if cand[0] < remaining and (best is None or cand < best):
                    best = cand
            if n >= 1 and v[0] < 0.0:
                tau = 0.0 if x[0] <= CONTACT_EPS else x[0] / -v[0]
                cand = (tau, 1, (ids[0],))
                if cand[0] < remaining and (best is None or cand < best):
                    best = cand
            if n >= 1 and v[-1] > 0.0:
                gap = length - x[-1]
                tau = 0.0 if gap <= CONTACT_EPS else gap / v[-1]
                cand = (tau, 1, (ids[-1],))
                if cand[0] < remaining and (best is None or cand < best):
                    best = cand

            if best is None:
                break
            tau, kind, key = best
            for i in range(n):
                x[i] += v[i] * tau
            remaining -= tau
            if kind == 0:
                a, b = key
                lo = min(ids.index(a), ids.index(b))  # adjacent by construction
                v[lo], v[lo + 1] = v[lo + 1], v[lo]
                logged.add((a, b, step))
            else:
                (oid,) = key
                i = ids.index(oid)
                v[i] = -v[i]
        else:
            raise RuntimeError("substep guard tripped; dynamics did not settle")
        for i in range(n):
            x[i] += v[i] * remaining

    events = tuple(
        CollisionEvent(a=a, b=b, step=s)
        for (s, a, b) in sorted((s, a, b) for (a, b, s) in logged)
    )
    state = {ids[i]: (x[i], v[i]) for i in range(n)}
    return EventLog(events=events), state


# ---------------------------------------------------------------------------
# serialization


def world_to_record(world: World, factual_log: EventLog) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "world_id": world.world_id,
        "config": {
            "num_objects": world.config.num_objects,
            "horizon": world.config.horizon,
            "arena_length": world.config.arena_length,
            "seed": world.config.seed,
        },
        "objects": [
            {
                "id": o.id,
                "color": o.color,
                "shape": o.shape,
                "material": o.material,
                "position0": o.position0,
                "velocity0": o.velocity0,
            }
            for o in world.objects
        ],
        "factual_events": [
            {"a": e.a, "b": e.b, "step": e.step} for e in factual_log.events
        ],
    }


def world_from_record(record: dict) -> tuple[World, EventLog]:
    cfg = WorldConfig(**record["config"])
    objects = tuple(ObjectSpec(**o) for o in record["objects"])
    world = World(config=cfg, objects=objects, world_id=record["world_id"])
    log = EventLog(
        events=tuple(CollisionEvent(**e) for e in record["factual_events"])
    )
    return world, log
