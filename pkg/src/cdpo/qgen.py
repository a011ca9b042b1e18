"""Counterfactual multiple-choice questions over micro-world event logs.

Each question asks which collision events will (or, when negated, will not)
happen once one object is removed from the world. Ground truth comes from
re-simulating without that object. Every option is classified by whether a
plain lookup in the *factual* log already answers it (Observational) or
whether answering requires reasoning about the removal (Inferential); a
question instance is Observational only if every correct option is.

The bias dataset is derived from Observational instances by stripping the
removal condition and relabeling answers against the factual log alone.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DatasetError, GenerationError
from .microworld import EventLog, World, simulate

SCHEMA_VERSION = 1

LETTERS = ("A", "B", "C", "D", "E")
MAX_OPTIONS = len(LETTERS)
MIN_OPTIONS = 2

#: option-count distribution for fully stocked pools
_K_CHOICES = (3, 4, 5)
_K_WEIGHTS = (0.15, 0.25, 0.60)

#: category weights when filling option slots beyond the mandatory one-per-category
_FILL_WEIGHTS = {"factual": 3.0, "cf_only": 0.5, "never": 1.0}


class QuestionType(str, enum.Enum):
    OBSERVATIONAL = "Observational"
    INFERENTIAL = "Inferential"


@dataclass(frozen=True)
class Event:
    """An unordered object pair, stored canonically with a < b."""

    a: int
    b: int

    def __post_init__(self) -> None:
        if not self.a < self.b:
            raise ValueError(f"Event requires a < b, got ({self.a}, {self.b})")

    @classmethod
    def of(cls, x: int, y: int) -> "Event":
        if x == y:
            raise ValueError("an object cannot collide with itself")
        return cls(min(x, y), max(x, y))

    def pair(self) -> tuple[int, int]:
        return (self.a, self.b)


@dataclass(frozen=True)
class NegatedEventQuery:
    """Assertion that the base event does **not** occur. No nesting."""

    event: Event

    def __post_init__(self) -> None:
        if not isinstance(self.event, Event):
            raise TypeError("NegatedEventQuery wraps a plain Event; nesting is not representable")


@dataclass(frozen=True)
class Option:
    letter: str
    event: Event

    def __post_init__(self) -> None:
        if self.letter not in LETTERS:
            raise ValueError(f"option letter must be one of {LETTERS}")


@dataclass(frozen=True)
class Question:
    world_id: int
    removed: int | None
    negated: bool
    options: tuple[Option, ...]
    answer_set: frozenset[str]
    option_types: tuple[tuple[str, QuestionType], ...]
    instance_type: QuestionType
    # carried in memory for bias-dataset construction; not serialized
    factual_log: EventLog | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        letters = [o.letter for o in self.options]
        if letters != list(LETTERS[: len(letters)]):
            raise ValueError("options must be lettered A.. in order")
        if not MIN_OPTIONS <= len(letters) <= MAX_OPTIONS:
            raise ValueError(f"questions carry {MIN_OPTIONS}-{MAX_OPTIONS} options")
        if not self.answer_set:
            raise ValueError("answer_set must be non-empty")
        if not self.answer_set <= set(letters):
            raise ValueError("answer_set letters must reference existing options")
        if [t for t, _ in self.option_types] != letters:
            raise ValueError("option_types must cover exactly the option letters, in order")

    def option_type(self, letter: str) -> QuestionType:
        for ltr, typ in self.option_types:
            if ltr == letter:
                return typ
        raise KeyError(letter)


# ---------------------------------------------------------------------------
# classification (lookup-vs-inference rule)


def extract_base_event(option: Option) -> Event:
    """The option's event with canonical participant order."""
    return option.event


def contains_negation(question: Question) -> bool:
    """Negation is structured metadata on the question, not surface text."""
    return question.negated


def negate_event(event: Event) -> NegatedEventQuery:
    return NegatedEventQuery(event=event)


def search_in_annotations(query: Event | NegatedEventQuery, log: EventLog) -> bool:
    """Membership of the query in the factual annotations.

    A plain event is found when its pair collided at any step. A negated
    query asserts absence, so it is found exactly when the pair never
    collided.
    """
    if isinstance(query, NegatedEventQuery):
        return query.event.pair() not in log.pairs()
    if isinstance(query, Event):
        return query.pair() in log.pairs()
    raise TypeError(f"unsupported query type {type(query).__name__}")


def classify_option(question: Question, option: Option, factual_log: EventLog) -> QuestionType:
    """Observational iff the (possibly negated) queried event is verifiable
    by direct lookup in the factual log; otherwise Inferential."""
    return _classify(question.negated, option.event, factual_log)


def _classify(negated: bool, event: Event, factual_log: EventLog) -> QuestionType:
    query: Event | NegatedEventQuery = negate_event(event) if negated else event
    found = search_in_annotations(query, factual_log)
    return QuestionType.OBSERVATIONAL if found else QuestionType.INFERENTIAL


def oracle_classify(question: Question, option: Option, world: World) -> QuestionType:
    """Independent classification path used only by tests.

    Re-simulates the factual run with a naive O(n^2 * horizon) scan over all
    pairs on a single global clock, then applies the found/negation rule by
    exhaustive enumeration of the collided pairs.
    """
    collided = _naive_factual_pairs(world)
    base = extract_base_event(option).pair()
    hit = any(pair == base for pair in sorted(collided))
    found = (not hit) if question.negated else hit
    return QuestionType.OBSERVATIONAL if found else QuestionType.INFERENTIAL


def _naive_factual_pairs(world: World) -> set[tuple[int, int]]:
    ids = [o.id for o in world.objects]
    pos = {o.id: o.position0 for o in world.objects}
    vel = {o.id: o.velocity0 for o in world.objects}
    # velocity swaps never let objects pass, so the left/right role of any
    # pair is fixed by the initial positions for the whole run
    rank = {oid: r for r, oid in enumerate(sorted(ids, key=lambda o: pos[o]))}
    end = float(world.config.horizon)
    length = world.config.arena_length
    eps = 1e-9
    collided: set[tuple[int, int]] = set()
    t = 0.0
    for _ in range(100_000):
        # earliest upcoming contact among every pair and both walls
        best_tau = None
        best_key = None
        for i in ids:
            for j in ids:
                if i >= j:
                    continue
                lo, hi = (i, j) if rank[i] < rank[j] else (j, i)
                closing = vel[lo] - vel[hi]
                if closing <= 0.0:
                    continue
                gap = pos[hi] - pos[lo]
                tau = 0.0 if gap <= eps else gap / closing
                key = (0, (min(i, j), max(i, j)))
                if best_tau is None or (tau, key) < (best_tau, best_key):
                    best_tau, best_key = tau, key
        for i in ids:
            if vel[i] < 0.0:
                tau = 0.0 if pos[i] <= eps else pos[i] / -vel[i]
            elif vel[i] > 0.0:
                gap = length - pos[i]
                tau = 0.0 if gap <= eps else gap / vel[i]
            else:
                continue
            key = (1, (i,))
            if best_tau is None or (tau, key) < (best_tau, best_key):
                best_tau, best_key = tau, key
        if best_tau is None or t + best_tau >= end:
            break
        t += best_tau
        for i in ids:
            pos[i] += vel[i] * best_tau
        kind, payload = best_key
        if kind == 0:
            a, b = payload
            vel[a], vel[b] = vel[b], vel[a]
            collided.add((a, b))
        else:
            (i,) = payload
            vel[i] = -vel[i]
    else:
        raise RuntimeError("naive scan did not settle")
    return collided


# ---------------------------------------------------------------------------
# generation


def generate_question(
    world: World,
    factual_log: EventLog,
    rng: np.random.Generator,
    max_attempts: int = 32,
) -> Question:
    """Draw one labeled question about `world`.

    Picks a removed object uniformly, simulates the counterfactual log,
    samples a negation flag, and builds 2-5 options drawn from factual
    events, counterfactual-only events, and never-occurring pairs (at least
    one of each category that is available). A letter is correct iff its
    event occurs in the counterfactual log XOR the question is negated.
    Redraws everything until the answer set is non-empty.
    """
    if len(world.objects) < 3:
        raise GenerationError("questions need at least 3 objects to build option pools")
    factual_pairs = factual_log.pairs()
    all_pairs = set(world.all_pairs())
    object_ids = sorted(o.id for o in world.objects)
    cf_cache: dict[int, frozenset[tuple[int, int]]] = {}

    for _ in range(max_attempts):
        removed = int(rng.choice(object_ids))
        negated = bool(rng.random() < 0.5)
        if removed not in cf_cache:
            cf_cache[removed] = simulate(world, removed).pairs()
        cf_pairs = cf_cache[removed]

        events = _draw_option_events(all_pairs, factual_pairs, cf_pairs, rng)
        if events is None:
            continue
        correct = {
            LETTERS[i]
            for i, ev in enumerate(events)
            if (ev.pair() in cf_pairs) != negated
        }
        if not correct:
            continue
        options = tuple(Option(LETTERS[i], ev) for i, ev in enumerate(events))
        option_types = tuple(
            (opt.letter, _classify(negated, opt.event, factual_log)) for opt in options
        )
        types_by_letter = dict(option_types)
        instance = (
            QuestionType.OBSERVATIONAL
            if all(types_by_letter[ltr] is QuestionType.OBSERVATIONAL for ltr in correct)
            else QuestionType.INFERENTIAL
        )
        return Question(
            world_id=world.world_id,
            removed=removed,
            negated=negated,
            options=options,
            answer_set=frozenset(correct),
            option_types=option_types,
            instance_type=instance,
            factual_log=factual_log,
        )
    raise GenerationError(
        f"no question with a non-empty answer set after {max_attempts} draws "
        f"(world_id={world.world_id})"
    )


def _draw_option_events(all_pairs, factual_pairs, cf_pairs, rng) -> list[Event] | None:
    """Draw option events in uniformly random order.

    Every question reserves exactly half the slots (rounded up) for events
    that actually occurred; scenes too sparse to fill that quota get a
    shorter option list or no question at all.  The final order is a
    uniform shuffle, so option position carries no information — judging
    any option requires the removal condition.  The fixed occurred-quota
    matters to the condition-stripped variant of these questions (see
    `build_bias_dataset`), where sorting the occurred block first turns
    the question into a watch-and-report exercise.
    """
    pools = {
        "factual": sorted(factual_pairs),
        "cf_only": sorted(cf_pairs - factual_pairs),
        "never": sorted(all_pairs - factual_pairs - cf_pairs),
    }
    available = sum(len(p) for p in pools.values())
    if available < MIN_OPTIONS:
        return None
    k = int(rng.choice(_K_CHOICES, p=_K_WEIGHTS))
    # keep the occurred block at exactly half the slots: scenes too sparse
    # to fill it get a shorter option list (or no question at all)
    k = min(k, available, 2 * len(pools["factual"]))
    if k < MIN_OPTIONS:
        return None

    def draw(name: str) -> tuple[str, tuple[int, int]]:
        pool = pools[name]
        return name, pool.pop(int(rng.integers(len(pool))))

    chosen: list[tuple[str, tuple[int, int]]] = []
    n_factual = (k + 1) // 2
    for _ in range(n_factual):
        chosen.append(draw("factual"))
    for name in ("cf_only", "never"):
        if pools[name] and len(chosen) < k:
            chosen.append(draw(name))
    while len(chosen) < k:
        names = [n for n in ("cf_only", "never") if pools[n]] or (
            ["factual"] if pools["factual"] else []
        )
        if not names:
            return None
        weights = np.array([_FILL_WEIGHTS[n] for n in names])
        name = names[int(rng.choice(len(names), p=weights / weights.sum()))]
        chosen.append(draw(name))

    order = rng.permutation(len(chosen))
    return [Event(*chosen[int(i)][1]) for i in order]


# ---------------------------------------------------------------------------
# bias dataset


def build_bias_dataset(questions: list[Question]) -> list[Question]:
    """Strip the removal condition from Observational instances.

    Keeps only questions whose instance type is Observational, clears
    `removed`, reorders the options so the events that actually occurred
    come first — the order a viewer transcribing the scene would use —
    and relabels the answer set against the *factual* log with the same
    XOR-negation rule (correct iff the event occurred factually, flipped
    under negation).  Every question reserves exactly half its option
    slots for occurred events, so after reordering the result is a pure
    watch-and-report exercise: position and count fully determine the
    answer.  Questions whose relabeled answer set is empty are dropped.
    """
    out: list[Question] = []
    for q in questions:
        if q.instance_type is not QuestionType.OBSERVATIONAL:
            continue
        if q.factual_log is None:
            raise DatasetError(
                f"question for world {q.world_id} does not carry its factual log"
            )
        pairs = q.factual_log.pairs()
        events = [opt.event for opt in q.options if opt.event.pair() in pairs]
        events += [opt.event for opt in q.options if opt.event.pair() not in pairs]
        options = tuple(Option(LETTERS[i], ev) for i, ev in enumerate(events))
        relabeled = frozenset(
            opt.letter for opt in options if (opt.event.pair() in pairs) != q.negated
        )
        if not relabeled:
            continue
        option_types = tuple(
            (opt.letter, _classify(q.negated, opt.event, q.factual_log))
            for opt in options
        )
        types = dict(option_types)
        instance = (
            QuestionType.OBSERVATIONAL
            if all(types[ltr] is QuestionType.OBSERVATIONAL for ltr in relabeled)
            else QuestionType.INFERENTIAL
        )
        out.append(
            replace(
                q,
                removed=None,
                options=options,
                answer_set=relabeled,
                option_types=option_types,
                instance_type=instance,
            )
        )
    if not out:
        raise DatasetError(
            "bias dataset is empty; widen generation (more Observational instances)"
        )
    return out


def permute_options(question: Question, rng: np.random.Generator) -> Question:
    """Return the same question with its options in a random order.

    Re-letters options to A.. in the new order and remaps the answer set
    and per-option types accordingly.  Destroys any information carried by
    option position while leaving content and labels intact.
    """
    perm = [int(i) for i in rng.permutation(len(question.options))]
    options = tuple(
        Option(LETTERS[new], question.options[old].event)
        for new, old in enumerate(perm)
    )
    old_types = dict(question.option_types)
    option_types = tuple(
        (LETTERS[new], old_types[question.options[old].letter])
        for new, old in enumerate(perm)
    )
    answer = frozenset(
        LETTERS[new]
        for new, old in enumerate(perm)
        if question.options[old].letter in question.answer_set
    )
    return replace(
        question, options=options, answer_set=answer, option_types=option_types
    )


# ---------------------------------------------------------------------------
# rendering and serialization


def render_question(question: Question, world: World) -> str:
    """Fixed-template text form, for the CLI and for eyeballing datasets."""
    head = "Which of the following events will"
    if question.negated:
        head += " not"
    head += " happen"
    if question.removed is not None:
        head += f" if the {world.object_by_id(question.removed).descriptor()} is removed"
    lines = [head + "?"]
    for opt in question.options:
        a = world.object_by_id(opt.event.a).descriptor()
        b = world.object_by_id(opt.event.b).descriptor()
        lines.append(f"{opt.letter}. the {a} and the {b} collide")
    return "\n".join(lines)


def find_object(world: World, **attrs: str) -> int:
    """Id of the unique object matching the given attribute values."""
    hits = [
        o.id
        for o in world.objects
        if all(getattr(o, k) == v for k, v in attrs.items())
    ]
    if len(hits) != 1:
        raise KeyError(f"{attrs} matches {len(hits)} objects, expected exactly 1")
    return hits[0]


def question_to_record(question: Question) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "world_id": question.world_id,
        "removed": question.removed,
        "negated": question.negated,
        "options": [
            {"letter": o.letter, "a": o.event.a, "b": o.event.b} for o in question.options
        ],
        "answer_set": sorted(question.answer_set),
        "option_types": {ltr: typ.value for ltr, typ in question.option_types},
        "instance_type": question.instance_type.value,
    }


def question_from_record(record: dict, factual_log: EventLog | None = None) -> Question:
    options = tuple(
        Option(o["letter"], Event(o["a"], o["b"])) for o in record["options"]
    )
    return Question(
        world_id=record["world_id"],
        removed=record["removed"],
        negated=record["negated"],
        options=options,
        answer_set=frozenset(record["answer_set"]),
        option_types=tuple(
            (o.letter, QuestionType(record["option_types"][o.letter])) for o in options
        ),
        instance_type=QuestionType(record["instance_type"]),
        factual_log=factual_log,
    )


def generate_question_of_type(
    world: World,
    factual_log: EventLog,
    target: QuestionType,
    rng: np.random.Generator,
    max_attempts: int = 25,
) -> Question | None:
    """Rejection-sample `generate_question` until the instance type matches."""
    for _ in range(max_attempts):
        try:
            q = generate_question(world, factual_log, rng)
        except GenerationError:
            return None
        if q.instance_type is target:
            return q
    return None
