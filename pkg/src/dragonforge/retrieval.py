"""Text-side input preparation: tokenization, entity linking, local-KG retrieval.

A raw segment becomes (TextSegment, LocalKG): dictionary longest-match linking
produces the linked entity set, 2-hop bridge expansion plus pruning produces
the node set, and the interaction node is wired to surviving linked entities.
Segments with no linked entities fall back to a dummy single-node graph.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .kg_store import EntityVocab, KnowledgeGraph, RelationVocab, R_EL

# Reserved token ids; bracketed uppercase forms cannot be produced by the
# lowercasing tokenizer, so corpus tokens never collide with them.
PAD, UNK, INT, MASK, SEP = 0, 1, 2, 3, 4
RESERVED_TOKENS = ["[PAD]", "[UNK]", "[INT]", "[MASK]", "[SEP]"]

# Sentinel node ids inside LocalKG node lists
V_INT = -1
DUMMY_NODE = -2

_TOKEN_RE = re.compile(r"[a-z0-9_']+|[^a-z0-9_'\s]")


def tokenize(text: str) -> list[tuple[str, int, int]]:
    """Lowercase whitespace+punctuation split; yields (token, start, end) spans."""
    out = []
    for m in _TOKEN_RE.finditer(text.lower()):
        out.append((m.group(0), m.start(), m.end()))
    return out


@dataclass
class TokenVocab:
    tokens: list[str] = field(default_factory=lambda: list(RESERVED_TOKENS))
    ids: dict[str, int] = field(default_factory=lambda: {t: i for i, t in enumerate(RESERVED_TOKENS)})

    def add(self, token: str) -> int:
        if token in self.ids:
            return self.ids[token]
        tid = len(self.tokens)
        self.tokens.append(token)
        self.ids[token] = tid
        return tid

    def id_of(self, token: str) -> int:
        return self.ids.get(token, UNK)

    def token_of(self, tid: int) -> str:
        return self.tokens[tid]

    def __len__(self) -> int:
        return len(self.tokens)

    def save_tsv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tid, tok in enumerate(self.tokens):
                fh.write("%s\t%d\n" % (tok, tid))

    @classmethod
    def load_tsv(cls, path: str) -> "TokenVocab":
        vocab = cls(tokens=[], ids={})
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, tid = line.split("\t")
                assert int(tid) == len(vocab.tokens), "vocab TSV ids must be dense"
                vocab.tokens.append(tok)
                vocab.ids[tok] = int(tid)
        return vocab


def build_vocab_from_texts(texts, min_freq: int = 2) -> TokenVocab:
    """Corpus-built vocabulary; tokens below min_freq map to [UNK]."""
    counts: dict[str, int] = {}
    for text in texts:
        for tok, _, _ in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    vocab = TokenVocab()
    for tok in sorted(counts):
        if counts[tok] >= min_freq:
            vocab.add(tok)
    return vocab


def build_vocab(corpus_file: str, min_freq: int = 2) -> TokenVocab:
    with open(corpus_file, encoding="utf-8") as fh:
        return build_vocab_from_texts(fh, min_freq=min_freq)


@dataclass
class TextSegment:
    """Token-id sequence with position 0 = [INT], plus char spans into the source."""
    token_ids: list[int]
    spans: list[tuple[int, int]]
    source: str = ""

    def __post_init__(self):
        assert self.token_ids[0] == INT, "segment must start with the interaction token"

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass
class LocalKG:
    """Retrieved subgraph; nodes[0] is the interaction-node sentinel.

    Edges are (local_head, rel, local_tail) index triples. Interaction-node
    edges use the reserved interaction-link relation and point at linked
    entities only.
    """
    nodes: list[int]
    edges: list[tuple[int, int, int]]
    linked: set[int]   # global entity ids, subset of nodes[1:]
    is_dummy: bool = False

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def entity_ids(self) -> list[int]:
        return self.nodes[1:]

    def non_interaction_edges(self) -> list[tuple[int, int, int]]:
        return [e for e in self.edges if e[1] != R_EL]

    def local_index(self, entity_id: int) -> int:
        return self.nodes.index(entity_id)

    def validate(self, g: KnowledgeGraph, max_nodes: int) -> None:
        assert self.nodes[0] == V_INT
        assert len(self.nodes) <= max_nodes + 1
        assert len(set(self.nodes)) == len(self.nodes), "duplicate nodes"
        if self.is_dummy:
            assert self.nodes == [V_INT, DUMMY_NODE] and not self.edges
            return
        linked_locals = {self.nodes.index(e) for e in self.linked}
        for h, r, t in self.edges:
            if r == R_EL:
                assert h == 0 and t in linked_locals, "interaction edges must target linked nodes"
            else:
                assert h != 0 and t != 0
                assert g.contains((self.nodes[h], r, self.nodes[t])), "edge not in global KG"


def _alias_index(entities: EntityVocab) -> dict[str, list[tuple[tuple[str, ...], int]]]:
    """first token -> [(token tuple, entity id)], longest aliases first."""
    index: dict[str, list[tuple[tuple[str, ...], int]]] = {}
    for surface in sorted(entities.aliases):
        eid = entities.aliases[surface]
        toks = tuple(t for t, _, _ in tokenize(surface))
        if not toks:
            continue
        index.setdefault(toks[0], []).append((toks, eid))
    for bucket in index.values():
        bucket.sort(key=lambda p: (-len(p[0]), p[0]))
    return index


def link_entities(text: str, entities: EntityVocab, token_vocab: TokenVocab,
                  alias_index: dict | None = None) -> tuple[TextSegment, set[int]]:
    """Greedy leftmost-longest dictionary match over lowercased tokens."""
    if alias_index is None:
        alias_index = _alias_index(entities)
    toks = tokenize(text)
    words = [t for t, _, _ in toks]
    linked: set[int] = set()
    i = 0
    while i < len(words):
        matched = 0
        for cand, eid in alias_index.get(words[i], ()):
            if len(cand) <= len(words) - i and tuple(words[i:i + len(cand)]) == cand:
                linked.add(eid)
                matched = len(cand)
                break
        i += matched if matched else 1
    token_ids = [INT] + [token_vocab.id_of(w) for w in words]
    spans = [(-1, -1)] + [(s, e) for _, s, e in toks]
    return TextSegment(token_ids, spans, source=text), linked


def dummy_local_kg() -> LocalKG:
    return LocalKG(nodes=[V_INT, DUMMY_NODE], edges=[], linked=set(), is_dummy=True)


def retrieve_local_kg(v_el: set[int], g: KnowledgeGraph, max_nodes: int,
                      rng: np.random.Generator) -> LocalKG:
    """Linked entities plus 2-hop bridge nodes, pruned to max_nodes.

    Bridges are nodes on an (undirected) length-2 path between two distinct
    linked entities; direct 1-hop pairs contribute no bridge. Linked entities
    are always retained ahead of bridge sampling.
    """
    if max_nodes < 1:
        raise ValueError("max_nodes must be >= 1")
    if not v_el:
        return dummy_local_kg()

    linked = sorted(v_el)
    neigh = {e: g.undirected_neighbor_set(e) for e in linked}
    bridges: set[int] = set()
    for i, a in enumerate(linked):
        for b in linked[i + 1:]:
            bridges |= neigh[a] & neigh[b]
    bridges -= v_el

    if len(linked) > max_nodes:
        keep_linked = sorted(rng.choice(linked, size=max_nodes, replace=False).tolist())
        keep_bridges: list[int] = []
    else:
        keep_linked = linked
        budget = max_nodes - len(linked)
        pool = sorted(bridges)
        if len(pool) > budget:
            keep_bridges = sorted(rng.choice(pool, size=budget, replace=False).tolist()) if budget else []
        else:
            keep_bridges = pool

    kept = keep_linked + keep_bridges
    kept_set = set(kept)
    nodes = [V_INT] + kept
    index = {e: i + 1 for i, e in enumerate(kept)}

    edges: list[tuple[int, int, int]] = []
    surviving_linked = [e for e in keep_linked if e in v_el]
    for e in surviving_linked:
        edges.append((0, R_EL, index[e]))
    seen: set[tuple[int, int, int]] = set()
    for v in kept:
        for rel, nb, direction in g.neighbors(v):
            if nb not in kept_set:
                continue
            h, t = (v, nb) if direction == 0 else (nb, v)
            key = (index[h], rel, index[t])
            if key not in seen:
                seen.add(key)
                edges.append(key)
    return LocalKG(nodes=nodes, edges=edges, linked=set(surviving_linked))


def verbalize_kg(local: LocalKG, entities: EntityVocab, relations: RelationVocab,
                 token_vocab: TokenVocab, budget: int | None = None) -> list[int]:
    """Render each non-interaction edge as `head rel tail` tokens, [SEP]-joined.

    Sentences are truncated whole when a budget (max token count for the
    suffix) is given. Returns a token-id suffix without the leading [INT].
    """
    if local.is_dummy:
        return []
    out: list[int] = []
    for h, r, t in local.edges:
        if r == R_EL:
            continue
        words = []
        for name in (entities.name(local.nodes[h]), relations.name(r), entities.name(local.nodes[t])):
            words.extend(tok for tok, _, _ in tokenize(name.lower().replace("_", " ")))
        sent = [token_vocab.id_of(w) for w in words]
        addition = ([SEP] if out else []) + sent
        if budget is not None and len(out) + len(addition) > budget:
            break
        out.extend(addition)
    return out


def segment_corpus(corpus_file: str, max_seq_len: int) -> list[str]:
    """Greedy packing of consecutive sentences into raw text segments.

    Documents are blank-line separated; sentences are lines. Segments hold at
    most max_seq_len - 1 tokens (one slot reserved for [INT]) and never cross
    document boundaries. Over-long single sentences are hard-split.
    """
    budget = max_seq_len - 1
    segments: list[str] = []
    with open(corpus_file, encoding="utf-8") as fh:
        text = fh.read()
    for doc in text.split("\n\n"):
        sentences = [s for s in doc.split("\n") if s.strip()]
        if not sentences:
            continue
        cur: list[str] = []
        cur_len = 0
        for sent in sentences:
            n = len(tokenize(sent))
            if n > budget:
                if cur:
                    segments.append(" ".join(cur))
                    cur, cur_len = [], 0
                # hard-split an over-long sentence on token boundaries
                toks = tokenize(sent)
                for lo in range(0, len(toks), budget):
                    chunk = toks[lo:lo + budget]
                    segments.append(sent[chunk[0][1]:chunk[-1][2]])
                continue
            if cur_len + n > budget:
                segments.append(" ".join(cur))
                cur, cur_len = [], 0
            cur.append(sent)
            cur_len += n
        if cur:
            segments.append(" ".join(cur))
    return segments
