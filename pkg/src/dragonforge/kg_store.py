"""Global knowledge-graph store: vocabularies, triplet set, adjacency index.

Triplet files are TSV lines `head<TAB>relation<TAB>tail`. Edges are stored
directed as written; inverse traversal is an index property. The relation
vocabulary reserves an interaction-link relation (and its inverse name) ahead
of file-defined relations, so local graphs can wire the interaction node.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class KGParseError(ValueError):
    """Malformed triplet/alias file; message carries the line number."""


class EmptyGraphError(ValueError):
    """Triplet file contained no triplets."""


# Reserved relation ids
R_EL = 0
R_EL_INV = 1
R_EL_NAME = "[R_EL]"
R_EL_INV_NAME = "[R_EL_INV]"
N_RESERVED_RELATIONS = 2

# Edge direction tags used by adjacency entries and GNN messages
DIR_OUT = 0  # the queried node is the head
DIR_IN = 1   # the queried node is the tail


def default_surface(name: str) -> str:
    return name.lower().replace("_", " ")


@dataclass
class EntityVocab:
    names: list[str] = field(default_factory=list)
    ids: dict[str, int] = field(default_factory=dict)
    # surface form -> entity id (defaults to the entity name itself)
    aliases: dict[str, int] = field(default_factory=dict)

    def add(self, name: str) -> int:
        if name in self.ids:
            return self.ids[name]
        eid = len(self.names)
        self.names.append(name)
        self.ids[name] = eid
        self.aliases.setdefault(default_surface(name), eid)
        return eid

    def name(self, eid: int) -> str:
        return self.names[eid]

    def lookup(self, name: str) -> int:
        return self.ids[name]

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class RelationVocab:
    names: list[str] = field(default_factory=lambda: [R_EL_NAME, R_EL_INV_NAME])
    ids: dict[str, int] = field(default_factory=lambda: {R_EL_NAME: R_EL, R_EL_INV_NAME: R_EL_INV})

    def add(self, name: str) -> int:
        if name in self.ids:
            return self.ids[name]
        rid = len(self.names)
        self.names.append(name)
        self.ids[name] = rid
        return rid

    def name(self, rid: int) -> str:
        return self.names[rid]

    def __len__(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class Triplet:
    head: int
    rel: int
    tail: int


class KnowledgeGraph:
    """Deduplicated triplet set with a bidirectional adjacency index."""

    def __init__(self, n_entities: int, n_relations: int):
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.triplets: list[tuple[int, int, int]] = []
        self._members: set[tuple[int, int, int]] = set()
        # entity id -> list of (rel, neighbor, direction)
        self._adj: dict[int, list[tuple[int, int, int]]] = {}

    def add(self, head: int, rel: int, tail: int) -> bool:
        self._check_entity(head)
        self._check_entity(tail)
        self._check_relation(rel)
        t = (head, rel, tail)
        if t in self._members:
            return False
        self._members.add(t)
        self.triplets.append(t)
        self._adj.setdefault(head, []).append((rel, tail, DIR_OUT))
        self._adj.setdefault(tail, []).append((rel, head, DIR_IN))
        return True

    def _check_entity(self, eid: int) -> None:
        if not 0 <= eid < self.n_entities:
            raise IndexError("entity id %d out of range [0, %d)" % (eid, self.n_entities))

    def _check_relation(self, rid: int) -> None:
        if not 0 <= rid < self.n_relations:
            raise IndexError("relation id %d out of range [0, %d)" % (rid, self.n_relations))

    def contains(self, t: Triplet | tuple[int, int, int]) -> bool:
        if isinstance(t, Triplet):
            t = (t.head, t.rel, t.tail)
        self._check_entity(t[0])
        self._check_entity(t[2])
        self._check_relation(t[1])
        return t in self._members

    def neighbors(self, v: int) -> list[tuple[int, int, int]]:
        """Incident edges of v, both directions, sorted by (rel, neighbor, direction)."""
        self._check_entity(v)
        return sorted(self._adj.get(v, []))

    def undirected_neighbor_set(self, v: int) -> set[int]:
        self._check_entity(v)
        return {nb for _, nb, _ in self._adj.get(v, [])}

    @property
    def n_triplets(self) -> int:
        return len(self.triplets)

    @property
    def n_adjacency_entries(self) -> int:
        return sum(len(v) for v in self._adj.values())


def load_kg(triplet_file: str, alias_file: str | None = None,
            add_inverse_relations: bool = False) -> tuple[KnowledgeGraph, EntityVocab, RelationVocab]:
    """Load a triplet TSV, building vocabularies from file contents.

    add_inverse_relations materializes `rel_inv` triplets (tail, rel_inv, head)
    as separate relation types; off by default.
    """
    entities = EntityVocab()
    relations = RelationVocab()
    raw: list[tuple[str, str, str]] = []
    with open(triplet_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise KGParseError("%s:%d: expected head<TAB>relation<TAB>tail, got %r"
                                   % (triplet_file, lineno, line))
            raw.append((parts[0], parts[1], parts[2]))
    if not raw:
        raise EmptyGraphError("%s: no triplets" % triplet_file)

    for h, r, t in raw:
        entities.add(h)
        relations.add(r)
        entities.add(t)
        if add_inverse_relations:
            relations.add(r + "_inv")

    g = KnowledgeGraph(len(entities), len(relations))
    for h, r, t in raw:
        g.add(entities.lookup(h), relations.ids[r], entities.lookup(t))
        if add_inverse_relations:
            g.add(entities.lookup(t), relations.ids[r + "_inv"], entities.lookup(h))

    if alias_file is not None:
        load_aliases(alias_file, entities)
    return g, entities, relations


def load_aliases(alias_file: str, entities: EntityVocab) -> None:
    """Merge a `surface<TAB>entity_name` TSV into the vocab's alias table."""
    with open(alias_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not all(parts):
                raise KGParseError("%s:%d: expected surface<TAB>entity_name, got %r"
                                   % (alias_file, lineno, line))
            surface, name = parts
            if name not in entities.ids:
                raise KGParseError("%s:%d: unknown entity %r" % (alias_file, lineno, name))
            entities.aliases[surface.lower()] = entities.ids[name]


def save_kg(g: KnowledgeGraph, entities: EntityVocab, relations: RelationVocab, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in g.triplets:
            fh.write("%s\t%s\t%s\n" % (entities.name(h), relations.name(r), entities.name(t)))
