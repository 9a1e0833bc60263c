"""Synthetic embodied environment over relational scene graphs.

A domain pairs a scene layout (rooms, furniture, a pool of small objects)
with a task family (fetch, relocate, stow, chain). Episodes are sampled
placements plus a templated instruction; the world steps deterministically
under unary actions; success is a set of goal triples holding in the state.

Observations have one canonical form everywhere: a sorted tuple of
(entity, relation, entity-or-state) string triples. Graphs, token
serializations, and stored demonstrations all derive from it.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import nncore

# ---------------------------------------------------------------------------
# fixed catalogs
# ---------------------------------------------------------------------------

ENTITY_TYPES = ("agent", "room", "object", "container", "surface", "device")

ROOM_KINDS = ("lounge", "kitchen", "study", "storage")
OBJECT_KINDS = ("cup", "book", "plum", "remote", "toy", "bottle", "wrench", "sponge")
CONTAINER_KINDS = ("box", "fridge", "drawer", "cabinet")
SURFACE_KINDS = ("table", "shelf", "desk", "bench")
DEVICE_KINDS = ("lamp", "fan", "radio", "heater")
KINDS = ("agent",) + ROOM_KINDS + OBJECT_KINDS + CONTAINER_KINDS + SURFACE_KINDS + DEVICE_KINDS

VERBS = ("walk", "grab", "open", "put", "putin", "switch")
RELATION_TOKENS = ("inside", "on", "close", "holds", "adjacent", "state")
STATE_TOKENS = ("open", "closed", "powered", "off")
INSTRUCTION_WORDS = ("fetch", "move", "to", "store", "in", "then")
SPECIAL_TOKENS = ("<pad>", "<inst>", "<obs>")

FEATURE_DIM = len(ENTITY_TYPES) + len(KINDS) + 2  # type one-hot, kind one-hot, open/powered bits

MAX_STEPS_DEFAULT = 20
MAX_SEQ_LEN_DEFAULT = 160
OBJECTS_PER_DOMAIN = 3

# scene templates: rooms, furniture placed per room, object kind pool
_SCENES = {
    "studio": {
        "rooms": ("lounge", "kitchen"),
        "surfaces": (("table", "lounge"), ("shelf", "kitchen")),
        "containers": (("box", "lounge"), ("fridge", "kitchen")),
        "devices": (("lamp", "lounge"),),
        "pool": ("cup", "book", "plum", "remote"),
    },
    "flat": {
        "rooms": ("lounge", "study"),
        "surfaces": (("table", "lounge"), ("desk", "study")),
        "containers": (("box", "lounge"), ("drawer", "study")),
        "devices": (("radio", "study"),),
        "pool": ("book", "remote", "toy", "cup"),
    },
    "bungalow": {
        "rooms": ("kitchen", "storage"),
        "surfaces": (("shelf", "kitchen"), ("bench", "storage")),
        "containers": (("fridge", "kitchen"), ("cabinet", "storage")),
        "devices": (("heater", "storage"),),
        "pool": ("plum", "bottle", "sponge", "cup"),
    },
    "workshop": {
        "rooms": ("storage", "study"),
        "surfaces": (("bench", "storage"), ("desk", "study")),
        "containers": (("cabinet", "storage"), ("drawer", "study")),
        "devices": (("fan", "study"),),
        "pool": ("wrench", "toy", "bottle", "sponge"),
    },
    # held-out layouts recombining rooms and furniture of the four above
    "loft": {
        "rooms": ("lounge", "storage"),
        "surfaces": (("table", "lounge"), ("bench", "storage")),
        "containers": (("box", "lounge"), ("cabinet", "storage")),
        "devices": (("lamp", "lounge"),),
        "pool": ("cup", "toy", "wrench", "book"),
    },
    "annex": {
        "rooms": ("kitchen", "study"),
        "surfaces": (("shelf", "kitchen"), ("desk", "study")),
        "containers": (("fridge", "kitchen"), ("drawer", "study")),
        "devices": (("fan", "study"),),
        "pool": ("plum", "remote", "sponge", "bottle"),
    },
}

SEEN_SCENES = ("studio", "flat", "bungalow", "workshop")
UNSEEN_SCENES = ("loft", "annex")
SEEN_TASKS = ("fetch", "relocate", "stow")
UNSEEN_TASKS = ("chain",)

# held-out domains mix novel scenes with seen tasks, seen scenes with the
# novel task, and novel-novel
UNSEEN_COMBOS = (
    ("loft", "fetch"),
    ("loft", "stow"),
    ("annex", "relocate"),
    ("studio", "chain"),
    ("workshop", "chain"),
    ("annex", "chain"),
)


class ActionParseError(ValueError):
    """Raised for action strings that do not scan as verb(entity)."""


class SerializationError(ValueError):
    """Raised when a token serialization exceeds the length budget."""


# ---------------------------------------------------------------------------
# domains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Entity:
    name: str
    etype: str
    kind: str
    room: str | None  # home room for furniture and devices, None for objects


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    scene: str
    task: str
    seed: int
    entities: tuple[Entity, ...]

    def by_type(self, etype: str):
        return tuple(e.name for e in self.entities if e.etype == etype)

    def entity(self, name: str) -> Entity:
        for e in self.entities:
            if e.name == name:
                return e
        raise KeyError(f"unknown entity {name!r} in domain {self.domain_id}")

    @property
    def labels(self):
        return tuple(e.name for e in self.entities)


def generate_domain(seed: int, scene: str, task: str) -> DomainSpec:
    """Instantiate a domain's entity catalog; deterministic in its arguments."""
    if scene not in _SCENES:
        raise ValueError(f"unknown scene category {scene!r}")
    if task not in SEEN_TASKS + UNSEEN_TASKS:
        raise ValueError(f"unknown task category {task!r}")
    tpl = _SCENES[scene]
    rng = np.random.default_rng(np.random.SeedSequence([seed, _stable_id(scene), _stable_id(task)]))
    entities = [Entity("agent", "agent", "agent", None)]
    for r in tpl["rooms"]:
        entities.append(Entity(f"{r}_0", "room", r, None))
    room_of = {r: f"{r}_0" for r in tpl["rooms"]}
    for kind, room in tpl["surfaces"]:
        entities.append(Entity(f"{kind}_0", "surface", kind, room_of[room]))
    for kind, room in tpl["containers"]:
        entities.append(Entity(f"{kind}_0", "container", kind, room_of[room]))
    for kind, room in tpl["devices"]:
        entities.append(Entity(f"{kind}_0", "device", kind, room_of[room]))
    picked = sorted(rng.choice(len(tpl["pool"]), size=OBJECTS_PER_DOMAIN, replace=False).tolist())
    for idx in picked:
        entities.append(Entity(f"{tpl['pool'][idx]}_0", "object", tpl["pool"][idx], None))
    return DomainSpec(f"{scene}-{task}", scene, task, seed, tuple(entities))


def _stable_id(name: str) -> int:
    # stable across processes, unlike hash()
    return int.from_bytes(name.encode(), "big") % (2**31)


def seen_domain_specs(seed: int, count: int = 12):
    combos = [(s, t) for s in SEEN_SCENES for t in SEEN_TASKS]
    if not 1 <= count <= len(combos):
        raise ValueError(f"seen domain count must be in [1, {len(combos)}], got {count}")
    return tuple(generate_domain(seed, s, t) for s, t in combos[:count])


def unseen_domain_specs(seed: int, count: int = 6):
    if not 0 <= count <= len(UNSEEN_COMBOS):
        raise ValueError(f"unseen domain count must be in [0, {len(UNSEEN_COMBOS)}], got {count}")
    return tuple(generate_domain(seed, s, t) for s, t in UNSEEN_COMBOS[:count])


# ---------------------------------------------------------------------------
# world state and dynamics
# ---------------------------------------------------------------------------


@dataclass
class WorldState:
    """Mutable episode state; to_triples() is the canonical observation."""

    loc: dict  # object name -> ("room"|"surface"|"container", holder name)
    held: str | None
    is_open: dict  # container name -> bool
    powered: dict  # device name -> bool
    agent_room: str
    close: frozenset  # entity names adjacent to the agent

    def clone(self) -> "WorldState":
        return WorldState(dict(self.loc), self.held, dict(self.is_open), dict(self.powered), self.agent_room, self.close)

    def to_triples(self, domain: DomainSpec):
        rooms = domain.by_type("room")
        triples = []
        for a in rooms:
            for b in rooms:
                if a < b:
                    triples.append((a, "adjacent", b))
        for e in domain.entities:
            if e.room is not None:
                triples.append((e.name, "inside", e.room))
        for obj, (mode, holder) in self.loc.items():
            triples.append((obj, "inside" if mode in ("room", "container") else "on", holder))
        triples.append(("agent", "inside", self.agent_room))
        for name in self.close:
            triples.append(("agent", "close", name))
        if self.held is not None:
            triples.append(("agent", "holds", self.held))
        for c, flag in self.is_open.items():
            triples.append((c, "state", "open" if flag else "closed"))
        for d, flag in self.powered.items():
            triples.append((d, "state", "powered" if flag else "off"))
        return tuple(sorted(triples))


def state_from_triples(domain: DomainSpec, triples) -> WorldState:
    """Rebuild a WorldState from its canonical triple form."""
    objects = set(domain.by_type("object"))
    containers = set(domain.by_type("container"))
    devices = set(domain.by_type("device"))
    loc = {}
    held = None
    is_open = {}
    powered = {}
    agent_room = None
    close = set()
    for e1, rel, e2 in triples:
        if e1 == "agent":
            if rel == "inside":
                agent_room = e2
            elif rel == "close":
                close.add(e2)
            elif rel == "holds":
                held = e2
        elif rel == "state":
            if e1 in containers:
                is_open[e1] = e2 == "open"
            elif e1 in devices:
                powered[e1] = e2 == "powered"
        elif e1 in objects:
            if rel == "on":
                loc[e1] = ("surface", e2)
            elif rel == "inside":
                loc[e1] = ("container" if e2 in containers else "room", e2)
    if agent_room is None:
        raise ValueError("triples carry no agent room")
    return WorldState(loc, held, is_open, powered, agent_room, frozenset(close))


@dataclass(frozen=True)
class StepResult:
    state: WorldState
    noop: bool
    reason: str | None = None


_ACTION_RE = re.compile(r"^([a-z]+)\(([a-z_0-9]+)\)$")


def parse_action(action: str):
    m = _ACTION_RE.match(action)
    if not m:
        raise ActionParseError(f"malformed action string {action!r}; expected verb(entity)")
    verb, arg = m.group(1), m.group(2)
    if verb not in VERBS:
        raise ActionParseError(f"unknown verb {verb!r} in action {action!r}")
    return verb, arg


def action_string(verb: str, arg: str) -> str:
    return f"{verb}({arg})"


def tokenize_action(action: str):
    verb, arg = parse_action(action)
    return [verb, arg]


def _room_of(domain: DomainSpec, state: WorldState, name: str) -> str:
    ent = domain.entity(name)
    if ent.etype == "room":
        return name
    if ent.etype in ("surface", "container", "device"):
        return ent.room
    if state.held == name:
        return state.agent_room
    mode, holder = state.loc[name]
    if mode == "room":
        return holder
    return _room_of(domain, state, holder)


def _contents(state, name):
    return {o for o, (_, holder) in state.loc.items() if holder == name}


def step(domain: DomainSpec, state: WorldState, action: str) -> StepResult:
    """Apply one action. The no-op flag is set exactly when the observable
    state is unchanged: failed preconditions and identity rewrites both
    count. Malformed strings raise ActionParseError."""
    res = _apply(domain, state, action)
    if not res.noop and res.state.to_triples(domain) == state.to_triples(domain):
        return StepResult(state, True, "action left the state unchanged")
    return res


def _apply(domain: DomainSpec, state: WorldState, action: str) -> StepResult:
    verb, arg = parse_action(action)
    known = {e.name for e in domain.entities}
    if arg not in known:
        raise ActionParseError(f"action {action!r} names unknown entity {arg!r}")
    ent = domain.entity(arg)
    s = state.clone()

    if verb == "walk":
        if ent.etype == "agent":
            return StepResult(state, True, "cannot walk to oneself")
        if ent.etype == "room":
            s.agent_room = arg
            s.close = frozenset()
        else:
            s.agent_room = _room_of(domain, state, arg)
            near = {arg} | _contents(state, arg)
            if ent.etype == "object" and state.held != arg:
                near.add(state.loc[arg][1])
            s.close = frozenset(n for n in near if n != s.agent_room and domain.entity(n).etype != "room")
        return StepResult(s, False)

    if verb == "grab":
        if ent.etype != "object":
            return StepResult(state, True, f"{arg} is not graspable")
        if state.held is not None:
            return StepResult(state, True, "hand is full")
        if arg not in state.close:
            return StepResult(state, True, f"agent is not close to {arg}")
        mode, holder = state.loc[arg]
        if mode == "container" and not state.is_open.get(holder, False):
            return StepResult(state, True, f"{holder} is closed")
        s.held = arg
        del s.loc[arg]
        return StepResult(s, False)

    if verb == "open":
        if ent.etype != "container":
            return StepResult(state, True, f"{arg} does not open")
        if arg not in state.close:
            return StepResult(state, True, f"agent is not close to {arg}")
        if state.is_open.get(arg, False):
            return StepResult(state, True, f"{arg} is already open")
        s.is_open[arg] = True
        return StepResult(s, False)

    if verb == "put":
        if ent.etype != "surface":
            return StepResult(state, True, f"cannot put onto {arg}")
        if state.held is None:
            return StepResult(state, True, "hand is empty")
        if arg not in state.close:
            return StepResult(state, True, f"agent is not close to {arg}")
        s.loc[state.held] = ("surface", arg)
        s.close = s.close | {state.held}
        s.held = None
        return StepResult(s, False)

    if verb == "putin":
        if ent.etype != "container":
            return StepResult(state, True, f"cannot put into {arg}")
        if state.held is None:
            return StepResult(state, True, "hand is empty")
        if arg not in state.close:
            return StepResult(state, True, f"agent is not close to {arg}")
        if not state.is_open.get(arg, False):
            return StepResult(state, True, f"{arg} is closed")
        s.loc[state.held] = ("container", arg)
        s.close = s.close | {state.held}
        s.held = None
        return StepResult(s, False)

    # switch
    if ent.etype != "device":
        return StepResult(state, True, f"{arg} has no switch")
    if arg not in state.close:
        return StepResult(state, True, f"agent is not close to {arg}")
    s.powered[arg] = not state.powered.get(arg, False)
    return StepResult(s, False)


def success(domain: DomainSpec, state: WorldState, goal) -> bool:
    """True when every goal triple holds in the state."""
    have = set(state.to_triples(domain))
    return all(tuple(t) in have for t in goal)


# ---------------------------------------------------------------------------
# episodes, instructions, expert
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Episode:
    domain_id: str
    instruction: tuple
    goal: tuple  # tuple of (e1, rel, e2) triples
    init: WorldState


def sample_episode(domain: DomainSpec, rng: np.random.Generator) -> Episode:
    """Sample placements and an instruction whose goal starts unsatisfied."""
    for _ in range(64):
        state = _sample_state(domain, rng)
        instruction, goal = _sample_task(domain, state, rng)
        if goal is not None and not success(domain, state, goal):
            return Episode(domain.domain_id, tuple(instruction), tuple(goal), state)
    raise RuntimeError(f"could not sample a non-trivial episode in {domain.domain_id}")


def _sample_state(domain: DomainSpec, rng: np.random.Generator) -> WorldState:
    rooms = domain.by_type("room")
    surfaces = domain.by_type("surface")
    containers = domain.by_type("container")
    devices = domain.by_type("device")
    spots = [("room", r) for r in rooms] + [("surface", s) for s in surfaces] + [("container", c) for c in containers]
    loc = {}
    for obj in domain.by_type("object"):
        mode, holder = spots[int(rng.integers(len(spots)))]
        loc[obj] = (mode, holder)
    is_open = {c: bool(rng.integers(2)) for c in containers}
    powered = {d: bool(rng.integers(2)) for d in devices}
    agent_room = rooms[int(rng.integers(len(rooms)))]
    return WorldState(loc, None, is_open, powered, agent_room, frozenset())


def _sample_task(domain: DomainSpec, state: WorldState, rng: np.random.Generator):
    objects = list(domain.by_type("object"))
    surfaces = list(domain.by_type("surface"))
    containers = list(domain.by_type("container"))
    pick = lambda xs: xs[int(rng.integers(len(xs)))]
    if domain.task == "fetch":
        o = pick(objects)
        return ["fetch", o], [("agent", "holds", o)]
    if domain.task == "relocate":
        o, s = pick(objects), pick(surfaces)
        return ["move", o, "to", s], [(o, "on", s)]
    if domain.task == "stow":
        o, c = pick(objects), pick(containers)
        return ["store", o, "in", c], [(o, "inside", c)]
    # chain: relocate one object, then stow another
    o1 = pick(objects)
    rest = [o for o in objects if o != o1]
    o2 = pick(rest)
    s = pick(surfaces)
    c = pick(containers)
    instruction = ["move", o1, "to", s, "then", "store", o2, "in", c]
    return instruction, [(o1, "on", s), (o2, "inside", c)]


def _plan_fetch(domain, state, obj):
    plan = []
    mode, holder = state.loc[obj]
    if mode == "container" and not state.is_open.get(holder, False):
        plan += [action_string("walk", holder), action_string("open", holder)]
    else:
        plan.append(action_string("walk", obj))
    plan.append(action_string("grab", obj))
    return plan


def _plan_deliver(domain, state, dest, putin: bool):
    plan = [action_string("walk", dest)]
    if putin and not state.is_open.get(dest, False):
        plan.append(action_string("open", dest))
    plan.append(action_string("putin" if putin else "put", dest))
    return plan


def script_expert(domain: DomainSpec, episode: Episode):
    """Shortest-path style plan for the episode's goal; always succeeds."""
    state = episode.init
    task = domain.task
    if task == "fetch":
        return _plan_fetch(domain, state, episode.instruction[1])
    if task == "relocate":
        o, s = episode.instruction[1], episode.instruction[3]
        return _plan_fetch(domain, state, o) + _plan_deliver(domain, state, s, putin=False)
    if task == "stow":
        o, c = episode.instruction[1], episode.instruction[3]
        return _plan_fetch(domain, state, o) + _plan_deliver(domain, state, c, putin=True)
    o1, s, o2, c = episode.instruction[1], episode.instruction[3], episode.instruction[6], episode.instruction[8]
    first = _plan_fetch(domain, state, o1) + _plan_deliver(domain, state, s, putin=False)
    # replay the first half to plan the second from the right state
    mid = state
    for a in first:
        mid = step(domain, mid, a).state
    return first + _plan_fetch(domain, mid, o2) + _plan_deliver(domain, mid, c, putin=True)


# ---------------------------------------------------------------------------
# observation graphs
# ---------------------------------------------------------------------------

RELATION_WEIGHTS_DEFAULT = {"inside": 1.0, "on": 1.0, "close": 1.0, "holds": 1.0, "adjacent": 1.0}


@dataclass(frozen=True)
class ObservationGraph:
    """Node-labelled scene graph: features V, adjacency A, relevance R."""

    labels: tuple
    V: np.ndarray  # (n, FEATURE_DIM)
    A: np.ndarray  # (n, n) binary, symmetric, zero diagonal
    R: np.ndarray  # (n, n) nonnegative, positive exactly on edges and the diagonal

    @property
    def n(self):
        return len(self.labels)


def graph_from_triples(domain: DomainSpec, triples, relation_weights=None) -> ObservationGraph:
    """Build the graph form of an observation; node order follows the catalog."""
    weights = dict(RELATION_WEIGHTS_DEFAULT)
    if relation_weights:
        weights.update(relation_weights)
    labels = domain.labels
    index = {name: i for i, name in enumerate(labels)}
    n = len(labels)
    V = np.zeros((n, FEATURE_DIM))
    A = np.zeros((n, n))
    R = np.zeros((n, n))
    for i, ent in enumerate(domain.entities):
        V[i, ENTITY_TYPES.index(ent.etype)] = 1.0
        V[i, len(ENTITY_TYPES) + KINDS.index(ent.kind)] = 1.0
    base = len(ENTITY_TYPES) + len(KINDS)
    for e1, rel, e2 in triples:
        if rel == "state":
            if e2 == "open":
                V[index[e1], base] = 1.0
            elif e2 == "powered":
                V[index[e1], base + 1] = 1.0
            continue
        i, j = index[e1], index[e2]
        A[i, j] = A[j, i] = 1.0
        w = weights[rel]
        R[i, j] = max(R[i, j], w)
        R[j, i] = max(R[j, i], w)
    np.fill_diagonal(R, 1.0)
    return ObservationGraph(labels, V, A, R)


def graph_from_state(domain: DomainSpec, state: WorldState, relation_weights=None) -> ObservationGraph:
    return graph_from_triples(domain, state.to_triples(domain), relation_weights)


# ---------------------------------------------------------------------------
# tokens and serialization
# ---------------------------------------------------------------------------


class Vocab:
    """Deterministic token table derived from the fixed catalogs."""

    def __init__(self):
        tokens = list(SPECIAL_TOKENS)
        entity_names = ["agent"] + [f"{k}_0" for k in KINDS if k != "agent"]
        for group in (VERBS, INSTRUCTION_WORDS, RELATION_TOKENS, STATE_TOKENS, tuple(entity_names)):
            for tok in group:
                if tok not in tokens:
                    tokens.append(tok)
        self.tokens = tuple(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.verb_ids = tuple(self.index[v] for v in VERBS)
        self.entity_ids = tuple(self.index[e] for e in entity_names)

    def __len__(self):
        return len(self.tokens)

    def encode(self, tokens):
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids):
        return [self.tokens[i] for i in ids]


def serialize_observation(triples):
    out = ["<obs>"]
    for t in sorted(tuple(x) for x in triples):
        out.extend(t)
    return out


def serialize_io(instruction, triples, max_seq_len: int = MAX_SEQ_LEN_DEFAULT):
    """Flatten (instruction, observation) to tokens; injective and reversible."""
    tokens = ["<inst>"] + list(instruction) + serialize_observation(triples)
    if len(tokens) > max_seq_len:
        raise SerializationError(f"serialized length {len(tokens)} exceeds the budget {max_seq_len}")
    return tokens


def parse_io(tokens):
    """Inverse of serialize_io."""
    if not tokens or tokens[0] != "<inst>" or "<obs>" not in tokens:
        raise ValueError("token stream lacks the <inst>/<obs> frame")
    cut = tokens.index("<obs>")
    instruction = list(tokens[1:cut])
    body = tokens[cut + 1 :]
    if len(body) % 3 != 0:
        raise ValueError("observation token count is not a multiple of 3")
    triples = tuple((body[i], body[i + 1], body[i + 2]) for i in range(0, len(body), 3))
    return instruction, triples


class InstructionEncoder:
    """Learned per-token embedding table; rows are gathered per instruction."""

    def __init__(self, vocab: Vocab, dim: int, rng: np.random.Generator, scale: float = 0.2):
        self.vocab = vocab
        self.dim = dim
        self.table = nncore.Tensor(rng.normal(scale=scale, size=(len(vocab), dim)), requires_grad=True)

    def encode(self, instruction) -> nncore.Tensor:
        ids = self.vocab.encode(instruction)
        return nncore.take_rows(self.table, ids)

    def params(self):
        return {"instruction_table": self.table}


# ---------------------------------------------------------------------------
# demonstrations and datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Demonstration:
    domain_id: str
    instruction: tuple
    goal: tuple
    steps: tuple  # of (obs_triples, action, next_obs_triples)

    def to_json(self) -> str:
        payload = {
            "domain_id": self.domain_id,
            "instruction": list(self.instruction),
            "goal": [list(t) for t in self.goal],
            "steps": [
                {"obs": [list(t) for t in obs], "action": act, "next_obs": [list(t) for t in nxt]}
                for obs, act, nxt in self.steps
            ],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(line: str) -> "Demonstration":
        payload = json.loads(line)
        steps = tuple(
            (
                tuple(tuple(t) for t in s["obs"]),
                s["action"],
                tuple(tuple(t) for t in s["next_obs"]),
            )
            for s in payload["steps"]
        )
        return Demonstration(
            payload["domain_id"],
            tuple(payload["instruction"]),
            tuple(tuple(t) for t in payload["goal"]),
            steps,
        )


def demonstrate(domain: DomainSpec, episode: Episode, max_steps: int = MAX_STEPS_DEFAULT) -> Demonstration:
    """Run the scripted expert and record the trajectory."""
    plan = script_expert(domain, episode)
    if len(plan) > max_steps:
        raise RuntimeError(f"expert plan of length {len(plan)} exceeds max_steps {max_steps}")
    state = episode.init
    steps = []
    for act in plan:
        res = step(domain, state, act)
        if res.noop:
            raise RuntimeError(f"expert action {act} was a no-op in {domain.domain_id}")
        steps.append((state.to_triples(domain), act, res.state.to_triples(domain)))
        state = res.state
    if not success(domain, state, episode.goal):
        raise RuntimeError(f"expert failed to reach the goal in {domain.domain_id}")
    return Demonstration(domain.domain_id, episode.instruction, episode.goal, tuple(steps))


def episode_rng(seed: int, domain_index: int, episode_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1013, domain_index, episode_index]))


def gen_demos(domains, seed: int, episodes_per_domain: int):
    """Expert demonstrations for each domain; deterministic in seed."""
    out = []
    for d_idx, domain in enumerate(domains):
        for e_idx in range(episodes_per_domain):
            rng = episode_rng(seed, d_idx, e_idx)
            episode = sample_episode(domain, rng)
            out.append(demonstrate(domain, episode))
    return out


def write_demos(path: str, demos):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        for d in demos:
            fh.write(d.to_json())
            fh.write("\n")


def read_demos(path: str):
    if not os.path.exists(path):
        raise FileNotFoundError(f"demonstration file not found: {path}")
    with open(path) as fh:
        return [Demonstration.from_json(line) for line in fh if line.strip()]


def train_split(demos, holdout: int):
    """First len-holdout demos train, the rest are held out; per domain."""
    by_domain = {}
    for d in demos:
        by_domain.setdefault(d.domain_id, []).append(d)
    train, held = [], []
    for domain_id in sorted(by_domain):
        ds = by_domain[domain_id]
        if holdout >= len(ds):
            raise ValueError(f"holdout {holdout} swallows all {len(ds)} demos of {domain_id}")
        train.extend(ds[: len(ds) - holdout])
        held.extend(ds[len(ds) - holdout :])
    return train, held
