"""Downstream adaptation: attention pooling over node vectors and
multiple-choice QA scoring over (question, answer-choice) inputs.

Each choice is encoded independently from the text "question [SEP] choice"
with its own retrieved local KG, pooled into a single vector, and scored by
a one-hidden-layer perceptron; training is cross-entropy over choice logits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .encoder import EncoderConfig, EncoderOutput, encode
from .kg_store import EntityVocab, KnowledgeGraph, RelationVocab
from .numerics import Tensor
from .retrieval import (SEP, LocalKG, TextSegment, TokenVocab, _alias_index,
                        dummy_local_kg, link_entities, retrieve_local_kg)
from .pretrain import Optimizer, clip_gradients


class DataError(ValueError):
    """Malformed downstream dataset record."""


@dataclass
class MCQAExample:
    question: str
    choices: list[str]
    gold: int

    def __post_init__(self):
        if len(self.choices) < 2:
            raise DataError("need at least two choices, got %r" % (self.choices,))
        if not 0 <= self.gold < len(self.choices):
            raise DataError("gold index %d out of range for %d choices" % (self.gold, len(self.choices)))


def load_mcqa(path: str) -> list[MCQAExample]:
    """JSON lines {question, choices: [...], gold: int}."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(MCQAExample(rec["question"], list(rec["choices"]), int(rec["gold"])))
            except (KeyError, TypeError, ValueError) as e:
                raise DataError("%s:%d: %s" % (path, lineno, e)) from None
    return out


def add_pooling_head(params: dict[str, Tensor], enc_cfg: EncoderConfig, seed: int) -> None:
    dt, dn = enc_cfg.d_text, enc_cfg.d_node
    specs = {
        "other.pool.wq": (dt, dn),
        "other.pool.wk": (dn, dn),
        "other.pool.mlp.w1": (dt + 2 * dn, dt),
        "other.pool.mlp.b1": (dt,),
        "other.pool.mlp.w2": (dt, 1),
        "other.pool.mlp.b2": (1,),
    }
    for name, shape in specs.items():
        if name.endswith((".b1", ".b2")):
            params[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)
        else:
            rng = nm.split_rng(seed, "init/" + name)
            params[name] = Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True, name=name)


def pool(out: EncoderOutput, params: dict[str, Tensor]) -> tuple[Tensor, np.ndarray]:
    """Attention-pool node vectors with the interaction token as query.

    Returns the pooled input vector (perceptron over [H_int; V_int; G]) and
    the attention weights over non-interaction nodes for inspection.
    """
    h_int = out.h_int                        # [1, d_text]
    v_int = out.v_int                        # [1, d_node]
    n = out.nodes.shape[0]
    v_rest = nm.gather_rows(out.nodes, list(range(1, n)))   # [J, d_node]
    q = nm.matmul(h_int, params["other.pool.wq"])           # [1, d_node]
    k = nm.matmul(v_rest, params["other.pool.wk"])          # [J, d_node]
    logits = nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / np.sqrt(k.shape[1]))
    alpha = nm.softmax(logits, axis=-1)                     # [1, J]
    g = nm.matmul(alpha, v_rest)                            # [1, d_node]
    z = nm.concat([h_int, v_int, g], axis=1)
    hid = nm.gelu(nm.add(nm.matmul(z, params["other.pool.mlp.w1"]), params["other.pool.mlp.b1"]))
    x = nm.add(nm.matmul(hid, params["other.pool.mlp.w2"]), params["other.pool.mlp.b2"])
    return x, alpha.values.reshape(-1).copy()


@dataclass
class FinetuneConfig:
    epochs: int = 6
    batch_size: int = 8
    lr_lm: float = 1e-4          # full-scale reference: {1e-5, 2e-5, 3e-5}
    lr_other: float = 1e-3       # full-scale reference: {3e-4, 1e-3}
    warmup_ratio: float = 0.1
    grad_clip: float = 1.0
    freeze_lm_epochs: int = 0    # full-scale reference: 4
    train_fraction: float = 1.0  # low-resource subsampling
    seed: int = 0
    early_stop: bool = True


def prepare_choice_inputs(ex: MCQAExample, kg: KnowledgeGraph, entities: EntityVocab,
                          token_vocab: TokenVocab, enc_cfg: EncoderConfig, seed: int,
                          example_idx: int, alias_index: dict | None = None
                          ) -> list[tuple[TextSegment, LocalKG]]:
    """One (segment, local KG) per choice, retrieved from question + choice."""
    if alias_index is None:
        alias_index = _alias_index(entities)
    out = []
    for c, choice in enumerate(ex.choices):
        q_seg, q_el = link_entities(ex.question, entities, token_vocab, alias_index)
        c_seg, c_el = link_entities(choice, entities, token_vocab, alias_index)
        ids = q_seg.token_ids + [SEP] + c_seg.token_ids[1:]
        spans = q_seg.spans + [(-1, -1)] + c_seg.spans[1:]
        if len(ids) > enc_cfg.max_seq_len:
            ids = ids[:enc_cfg.max_seq_len]
            spans = spans[:enc_cfg.max_seq_len]
        seg = TextSegment(ids, spans, source=ex.question + " [SEP] " + choice)
        v_el = q_el | c_el
        local = retrieve_local_kg(v_el, kg, enc_cfg.max_nodes,
                                  nm.split_rng(seed, "ft_retrieval", example_idx, c)) \
            if v_el else dummy_local_kg()
        out.append((seg, local))
    return out


def choice_logits(inputs: list[tuple[TextSegment, LocalKG]], params: dict[str, Tensor],
                  enc_cfg: EncoderConfig, mode: str, seed: int = 0) -> tuple[Tensor, list[np.ndarray]]:
    """Encode and pool each choice; returns [1, n_choices] logits."""
    logits, alphas = [], []
    for c, (seg, local) in enumerate(inputs):
        drop_seed = int(nm.split_rng(seed, "ft_dropout", c).integers(2 ** 62)) if mode == "train" else 0
        out = encode(seg, local, params, enc_cfg, mode=mode, seed=drop_seed)
        x, alpha = pool(out, params)
        logits.append(x)
        alphas.append(alpha)
    return nm.concat(logits, axis=1), alphas


def evaluate_mcqa(examples: list[MCQAExample], kg: KnowledgeGraph, entities: EntityVocab,
                  token_vocab: TokenVocab, params: dict[str, Tensor],
                  enc_cfg: EncoderConfig, seed: int = 0) -> dict:
    """Accuracy report {split-agnostic}: n, accuracy, per_choice_count."""
    alias_index = _alias_index(entities)
    correct = 0
    per_choice: dict[str, int] = {}
    for i, ex in enumerate(examples):
        inputs = prepare_choice_inputs(ex, kg, entities, token_vocab, enc_cfg, seed, i, alias_index)
        logits, _ = choice_logits(inputs, params, enc_cfg, mode="eval")
        pred = int(np.argmax(logits.values.reshape(-1)))
        correct += int(pred == ex.gold)
        key = str(len(ex.choices))
        per_choice[key] = per_choice.get(key, 0) + 1
    n = len(examples)
    return {"n": n, "accuracy": correct / n if n else 0.0, "per_choice_count": per_choice}


def subsample(examples: list[MCQAExample], fraction: float, seed: int) -> list[MCQAExample]:
    """Seeded selection of ceil(fraction * N) examples (low-resource setting)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("train fraction must be in (0, 1]")
    if fraction == 1.0:
        return list(examples)
    k = int(np.ceil(fraction * len(examples)))
    rng = nm.split_rng(seed, "ft_subsample")
    idx = sorted(rng.choice(len(examples), size=k, replace=False).tolist())
    return [examples[i] for i in idx]


def finetune_mcqa(train_examples: list[MCQAExample], dev_examples: list[MCQAExample],
                  kg: KnowledgeGraph, entities: EntityVocab, token_vocab: TokenVocab,
                  params: dict[str, Tensor], enc_cfg: EncoderConfig, cfg: FinetuneConfig
                  ) -> tuple[dict[str, Tensor], list[dict]]:
    """Train the pooling head (and encoder) on MCQA; dev-accuracy early stopping.

    Returns the best parameters by dev accuracy and a per-epoch history.
    """
    if "other.pool.wq" not in params:
        add_pooling_head(params, enc_cfg, cfg.seed)
    train_set = subsample(train_examples, cfg.train_fraction, cfg.seed)
    if not train_set:
        raise DataError("empty training set")
    alias_index = _alias_index(entities)
    steps_per_epoch = int(np.ceil(len(train_set) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    opt = Optimizer(params, cfg.lr_lm, cfg.lr_other, total_steps, cfg.warmup_ratio)

    history: list[dict] = []
    best_acc, best_params = -1.0, None
    step = 0
    for epoch in range(cfg.epochs):
        opt.frozen_prefixes = ("lm.",) if epoch < cfg.freeze_lm_epochs else ()
        order = nm.split_rng(cfg.seed, "ft_order", epoch).permutation(len(train_set))
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, len(train_set), cfg.batch_size):
            batch = [train_set[int(i)] for i in order[lo:lo + cfg.batch_size]]
            with nm.ComputationTape() as tape:
                losses = []
                for bi, ex in enumerate(batch):
                    inputs = prepare_choice_inputs(ex, kg, entities, token_vocab, enc_cfg,
                                                   cfg.seed, int(order[lo + bi]), alias_index)
                    ft_seed = int(nm.split_rng(cfg.seed, "ft_step", step, bi).integers(2 ** 62))
                    logits, _ = choice_logits(inputs, params, enc_cfg, mode="train", seed=ft_seed)
                    losses.append(nm.reduce_mean(nm.cross_entropy_with_logits(logits, [ex.gold])))
                loss = nm.reduce_mean(nm.stack_scalars(losses))
                tape.backward(loss)
            clip_gradients(params, cfg.grad_clip)
            opt.step(step)
            opt.zero_grad()
            epoch_loss += loss.item()
            n_batches += 1
            step += 1
        dev = evaluate_mcqa(dev_examples, kg, entities, token_vocab, params, enc_cfg, cfg.seed)
        history.append({"epoch": epoch, "train_loss": epoch_loss / max(1, n_batches),
                        "dev_accuracy": dev["accuracy"]})
        if dev["accuracy"] > best_acc:
            best_acc = dev["accuracy"]
            best_params = {k: Tensor(p.values.copy(), requires_grad=True, name=k)
                           for k, p in params.items()}
    if cfg.early_stop and best_params is not None:
        params = best_params
    return params, history
