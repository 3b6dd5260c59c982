"""Synthetic key-value update episodes and their supersession labels.

An episode is a token stream of entity updates followed by queries. The only
correct answer for a query is the entity's most recent value; every earlier
update is superseded and carries a ground-truth label saying so. Three
generators cover the benchmark: single-entity update chains, interleaved
multi-entity chains, and mixed streams where some entities are never queried
(those updates are evictable noise).

Token layout: PAD=0 BOS=1 UPD=2 QRY=3, entities 10..109, values 200..699.
Episode shape: [BOS] (UPD e v)*n per entity, then (QRY e) per queried entity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, UPD, QRY = 0, 1, 2, 3
ENTITY_BASE, N_ENTITIES = 10, 100
VALUE_BASE, N_VALUES = 200, 500
VOCAB_SIZE = 1024

KINDS = ("pi", "multi", "mixed")


@dataclass
class Update:
    position: int        # index of the UPD marker token
    entity: int          # entity token id
    value: int           # value token id
    superseded: bool     # a later update to the same entity exists


@dataclass
class Query:
    position: int            # index of the entity token inside the query block
    entity: int
    gold: int                # latest value token for this entity
    superseded_values: tuple # value tokens of this entity's superseded updates


@dataclass
class Episode:
    kind: str
    depth: int               # updates per entity
    tokens: np.ndarray = field(repr=False)
    updates: list = field(default_factory=list)
    queries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Episode)
                and self.kind == other.kind
                and self.depth == other.depth
                and np.array_equal(self.tokens, other.tokens)
                and self.updates == other.updates
                and self.queries == other.queries)

    def queried_entities(self) -> set:
        return {q.entity for q in self.queries}

    def evictable_mask(self) -> np.ndarray:
        """Per-position ground truth for gate supervision.

        True on every token of an update block that is superseded or whose
        entity is never queried; False elsewhere (structure tokens, current
        updates of queried entities, query blocks).
        """
        out = np.zeros(len(self.tokens), dtype=bool)
        queried = self.queried_entities()
        for u in self.updates:
            if u.superseded or u.entity not in queried:
                out[u.position:u.position + 3] = True
        return out

    def superseded_mask(self) -> np.ndarray:
        """True on every token of a superseded update block."""
        out = np.zeros(len(self.tokens), dtype=bool)
        for u in self.updates:
            if u.superseded:
                out[u.position:u.position + 3] = True
        return out

    def wake_targets(self) -> np.ndarray:
        """Next-token targets; query-entity positions target their gold value."""
        t = len(self.tokens)
        targets = np.empty(t, dtype=np.int64)
        targets[:t - 1] = self.tokens[1:]
        targets[t - 1] = PAD
        for q in self.queries:
            targets[q.position] = q.gold
        return targets


def _sample_values(rng: np.random.Generator, n: int) -> list[int]:
    """n value tokens, consecutive draws never equal."""
    vals = [VALUE_BASE + int(rng.integers(N_VALUES))]
    for _ in range(n - 1):
        nxt = VALUE_BASE + int(rng.integers(N_VALUES - 1))
        if nxt >= vals[-1]:
            nxt += 1
        vals.append(nxt)
    return vals


def _assemble(kind: str, depth: int, schedule: list, queried: list) -> Episode:
    """Build the token stream from (entity, value) update order + query list."""
    tokens = [BOS]
    updates = []
    last_index: dict[int, int] = {}
    for ent, val in schedule:
        pos = len(tokens)
        tokens.extend((UPD, ent, val))
        updates.append(Update(position=pos, entity=ent, value=val, superseded=False))
        last_index[ent] = len(updates) - 1
    for i, u in enumerate(updates):
        u.superseded = i != last_index[u.entity]
    queries = []
    per_entity_values: dict[int, list] = {}
    for u in updates:
        per_entity_values.setdefault(u.entity, []).append(u.value)
    for ent in queried:
        pos = len(tokens) + 1
        tokens.extend((QRY, ent))
        vals = per_entity_values[ent]
        queries.append(Query(position=pos, entity=ent, gold=vals[-1],
                             superseded_values=tuple(vals[:-1])))
    if len(tokens) > 1024:
        raise ValueError(f"episode length {len(tokens)} exceeds the context limit")
    return Episode(kind=kind, depth=depth, tokens=np.asarray(tokens, dtype=np.int64),
                   updates=updates, queries=queries)


def gen_pi_episode(depth: int, rng: np.random.Generator) -> Episode:
    """Single entity updated `depth` times, then queried once."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    ent = ENTITY_BASE + int(rng.integers(N_ENTITIES))
    vals = _sample_values(rng, depth)
    return _assemble("pi", depth, [(ent, v) for v in vals], [ent])


def _interleaved(entities: list[int], depth: int, rng: np.random.Generator) -> list:
    """Round-robin update schedule: one update per entity per round, entity
    order reshuffled each round so no entity always goes last."""
    per_entity = {e: _sample_values(rng, depth) for e in entities}
    schedule = []
    for round_i in range(depth):
        order = list(entities)
        rng.shuffle(order)
        for e in order:
            schedule.append((e, per_entity[e][round_i]))
    return schedule


def gen_multi_entity_episode(n_entities: int, depth: int, rng: np.random.Generator) -> Episode:
    """Several entities updated in interleaved rounds; all of them queried."""
    if depth < 1 or n_entities < 1:
        raise ValueError("n_entities and depth must be >= 1")
    ents = [ENTITY_BASE + int(i) for i in rng.choice(N_ENTITIES, n_entities, replace=False)]
    schedule = _interleaved(ents, depth, rng)
    queried = list(ents)
    rng.shuffle(queried)
    return _assemble("multi", depth, schedule, queried)


def gen_mixed_relevance_episode(n_queried: int, n_distractor: int, depth: int,
                                rng: np.random.Generator) -> Episode:
    """Interleaved updates where only some entities are ever queried."""
    if depth < 1 or n_queried < 1 or n_distractor < 0:
        raise ValueError("bad mixed-relevance episode shape")
    total = n_queried + n_distractor
    ents = [ENTITY_BASE + int(i) for i in rng.choice(N_ENTITIES, total, replace=False)]
    schedule = _interleaved(ents, depth, rng)
    queried = list(ents[:n_queried])
    rng.shuffle(queried)
    return _assemble("mixed", depth, schedule, queried)


def gen_training_episode(rng: np.random.Generator, depth_cap: int, pi_only: bool = False) -> Episode:
    """Sample across all three episode kinds (pi 50%, multi 25%, mixed 25%).

    The training loop itself consumes pure single-entity streams; this mixed
    sampler exists for data tooling and for tests that need to exercise every
    generator under one roof. Non-pi kinds keep their total update count
    within the pi cap so episode cost stays comparable across kinds.
    """
    kind = "pi" if pi_only else ("pi", "multi", "mixed")[int(rng.choice(3, p=[0.5, 0.25, 0.25]))]
    if kind == "pi":
        return gen_pi_episode(int(rng.integers(1, depth_cap + 1)), rng)
    if kind == "multi":
        k = int(rng.integers(2, 5))
        m = int(rng.integers(1, max(1, min(depth_cap, 30 // k)) + 1))
        return gen_multi_entity_episode(k, m, rng)
    kq = int(rng.integers(1, 3))
    kd = int(rng.integers(1, 3))
    m = int(rng.integers(1, max(1, min(depth_cap, 30 // (kq + kd))) + 1))
    return gen_mixed_relevance_episode(kq, kd, m, rng)


EVAL_DEPTHS = (1, 2, 5, 10, 15, 20, 30)


def gen_eval_set(rng: np.random.Generator, depths=EVAL_DEPTHS, per_depth: int = 200) -> list[Episode]:
    """Fixed held-out grid of single-entity episodes."""
    out = []
    for depth in depths:
        for _ in range(per_depth):
            out.append(gen_pi_episode(depth, rng))
    return out


# ---------------------------------------------------------------------------
# line-delimited episode files


def serialize_episodes(episodes, path) -> None:
    lines = []
    for ep in episodes:
        toks = " ".join(str(int(t)) for t in ep.tokens)
        qpos = " ".join(str(q.position) for q in ep.queries)
        golds = " ".join(str(q.gold) for q in ep.queries)
        spos = " ".join(str(u.position) for u in ep.updates if u.superseded)
        lines.append("\t".join((str(ep.depth), ep.kind, toks, qpos, golds, spos)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


class EpisodeParseError(ValueError):
    pass


def _parse_episode(line: str, lineno: int) -> Episode:
    parts = line.split("\t")
    if len(parts) != 6:
        raise EpisodeParseError(f"line {lineno}: expected 6 tab-separated fields, got {len(parts)}")
    depth_s, kind, toks_s, qpos_s, golds_s, spos_s = parts
    if kind not in KINDS:
        raise EpisodeParseError(f"line {lineno}: unknown episode kind {kind!r}")
    try:
        depth = int(depth_s)
        tokens = [int(x) for x in toks_s.split()]
        qpos = [int(x) for x in qpos_s.split()] if qpos_s else []
        golds = [int(x) for x in golds_s.split()] if golds_s else []
        spos = set(int(x) for x in spos_s.split()) if spos_s else set()
    except ValueError as e:
        raise EpisodeParseError(f"line {lineno}: {e}") from None
    for t in tokens:
        if not 0 <= t < VOCAB_SIZE:
            raise EpisodeParseError(f"line {lineno}: token id {t} outside vocabulary [0, {VOCAB_SIZE})")
    if len(qpos) != len(golds):
        raise EpisodeParseError(f"line {lineno}: {len(qpos)} query positions vs {len(golds)} gold ids")

    # re-derive structure from the token grammar
    if not tokens or tokens[0] != BOS:
        raise EpisodeParseError(f"line {lineno}: episode must start with BOS")
    updates = []
    p = 1
    while p < len(tokens) and tokens[p] == UPD:
        if p + 2 >= len(tokens):
            raise EpisodeParseError(f"line {lineno}: truncated update block at position {p}")
        updates.append(Update(position=p, entity=tokens[p + 1], value=tokens[p + 2],
                              superseded=(p in spos)))
        p += 3
    per_entity_values: dict[int, list] = {}
    for u in updates:
        per_entity_values.setdefault(u.entity, []).append(u.value)
    queries = []
    gi = 0
    while p < len(tokens) and tokens[p] == QRY:
        if p + 1 >= len(tokens):
            raise EpisodeParseError(f"line {lineno}: truncated query block at position {p}")
        ent = tokens[p + 1]
        if ent not in per_entity_values:
            raise EpisodeParseError(f"line {lineno}: query for entity {ent} with no updates")
        vals = per_entity_values[ent]
        if gi >= len(golds):
            raise EpisodeParseError(f"line {lineno}: more query blocks than gold ids")
        queries.append(Query(position=p + 1, entity=ent, gold=golds[gi],
                             superseded_values=tuple(vals[:-1])))
        gi += 1
        p += 2
    if p != len(tokens):
        raise EpisodeParseError(f"line {lineno}: trailing tokens at position {p}")
    if [q.position for q in queries] != qpos:
        raise EpisodeParseError(f"line {lineno}: stored query positions disagree with token grammar")
    return Episode(kind=kind, depth=depth, tokens=np.asarray(tokens, dtype=np.int64),
                   updates=updates, queries=queries)


def load_episodes(path) -> list[Episode]:
    text = Path(path).read_text(encoding="utf-8")
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            out.append(_parse_episode(line, lineno))
    return out
