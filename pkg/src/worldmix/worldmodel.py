"""Layered base model, low-rank adapters, and the routed mixture.

The base model is a stack of residual feed-forward blocks over a pooled
token embedding. An adapter is one low-rank pair per layer; a mixture runs
the base recurrence with per-layer weighted adapter deltas added in:

    y(l) = block_l(y(l-1)) + sum_j wbar_lj * up_lj(down_lj(y(l-1)))

Zero weights skip an adapter entirely, so all-zero routing reproduces the
frozen base bit for bit and a one-hot row reproduces the single attached
adapter. Training never touches base weights; only adapter factors move.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graphworld as gw
from . import nncore as nc
from .checkpoints import load_checkpoint, save_checkpoint

ACTION_SLOTS = 2  # every action is verb(entity)


class BaseModel:
    """Frozen-by-convention layered world model over pooled tokens."""

    def __init__(self, vocab: gw.Vocab, n_layers: int, d_h: int, max_seq_len: int, rng: np.random.Generator):
        if n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {n_layers}")
        self.vocab = vocab
        self.n_layers = n_layers
        self.d_h = d_h
        self.max_seq_len = max_seq_len
        s = 1.0 / np.sqrt(d_h)
        self.params = {
            "embed": nc.Tensor(rng.normal(scale=0.5, size=(len(vocab), d_h)), requires_grad=True),
            "in_pos": nc.Tensor(rng.normal(scale=0.2, size=(max_seq_len, d_h)), requires_grad=True),
            "act_head": nc.Tensor(rng.normal(scale=s, size=(d_h, len(vocab))), requires_grad=True),
            "obs_head": nc.Tensor(rng.normal(scale=s, size=(d_h, len(vocab))), requires_grad=True),
            "act_pos": nc.Tensor(rng.normal(scale=0.2, size=(ACTION_SLOTS, d_h)), requires_grad=True),
            "obs_pos": nc.Tensor(rng.normal(scale=0.2, size=(max_seq_len, d_h)), requires_grad=True),
        }
        for l in range(n_layers):
            self.params[f"w1_{l}"] = nc.Tensor(rng.normal(scale=s, size=(d_h, d_h)), requires_grad=True)
            self.params[f"w2_{l}"] = nc.Tensor(rng.normal(scale=0.5 * s, size=(d_h, d_h)), requires_grad=True)

    def param_list(self):
        return list(self.params.values())


class Adapter:
    """One low-rank (down, up) pair per base layer; zero delta at init."""

    def __init__(self, n_layers: int, d_h: int, rank: int, rng: np.random.Generator):
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.n_layers = n_layers
        self.rank = rank
        self.params = {}
        for l in range(n_layers):
            self.params[f"down_{l}"] = nc.Tensor(
                rng.normal(scale=1.0 / np.sqrt(d_h), size=(d_h, rank)), requires_grad=True
            )
            self.params[f"up_{l}"] = nc.Tensor(np.zeros((rank, d_h)), requires_grad=True)

    def param_list(self):
        return list(self.params.values())


@dataclass
class Mixture:
    base: BaseModel
    adapters: list  # of Adapter
    domain_ids: list  # adapter j belongs to domain_ids[j]

    @property
    def n_experts(self):
        return len(self.adapters)

    def zero_weights(self):
        return np.zeros((self.base.n_layers, self.n_experts))

    def one_hot_weights(self, j: int):
        w = self.zero_weights()
        w[:, j] = 1.0
        return w

    def adapter_params(self):
        out = []
        for a in self.adapters:
            out.extend(a.param_list())
        return out


def embed_tokens(base: BaseModel, token_ids) -> nc.Tensor:
    """Pooled, position-tagged token embedding: mean_t(embed[t] + pos[t])."""
    ids = list(token_ids)
    if len(ids) > base.max_seq_len:
        raise gw.SerializationError(f"{len(ids)} tokens exceed the model budget {base.max_seq_len}")
    rows = nc.take_rows(base.params["embed"], ids)
    pos = nc.take_rows(base.params["in_pos"], np.arange(len(ids)))
    return nc.mean_rows(nc.add(rows, pos))


def mixture_forward(mixture: Mixture, weights, token_ids) -> nc.Tensor:
    """Routed layer recurrence; returns the final hidden state.

    weights is an (n_layers, n_experts) array of blend coefficients; exact
    zeros skip the expert at that layer.
    """
    base = mixture.base
    weights = np.asarray(weights, dtype=np.float64)
    want = (base.n_layers, mixture.n_experts)
    if weights.shape != want:
        raise ValueError(f"weights shape {weights.shape} does not match {want}")
    y = embed_tokens(base, token_ids)
    for l in range(base.n_layers):
        h = nc.matmul(y, base.params[f"w1_{l}"])
        h = nc.relu(h)
        out = nc.add(y, nc.matmul(h, base.params[f"w2_{l}"]))
        for j, adapter in enumerate(mixture.adapters):
            w = float(weights[l, j])
            if w == 0.0:
                continue
            delta = nc.matmul(nc.matmul(y, adapter.params[f"down_{l}"]), adapter.params[f"up_{l}"])
            out = nc.add(out, nc.scale(delta, w))
        y = out
    return y


def base_forward(base: BaseModel, token_ids) -> nc.Tensor:
    """The frozen base alone; identical op sequence to all-zero routing."""
    return mixture_forward(Mixture(base, [], []), np.zeros((base.n_layers, 0)), token_ids)


def _head_logits(base: BaseModel, y: nc.Tensor, head: str, pos: str, count: int) -> nc.Tensor:
    slots = nc.take_rows(base.params[pos], np.arange(count))
    return nc.matmul(nc.add_row(slots, y), base.params[head])


def action_logits(base: BaseModel, y: nc.Tensor) -> nc.Tensor:
    return _head_logits(base, y, "act_head", "act_pos", ACTION_SLOTS)


def observation_logits(base: BaseModel, y: nc.Tensor, count: int) -> nc.Tensor:
    if count > base.max_seq_len:
        raise gw.SerializationError(f"{count} observation tokens exceed the budget {base.max_seq_len}")
    return _head_logits(base, y, "obs_head", "obs_pos", count)


def predict_action(mixture: Mixture, weights, instruction, obs_triples, allowed_args=None) -> str:
    """Greedy decode: argmax over verb tokens, then over argument tokens.

    allowed_args restricts the argument slot to the entities actually
    present (the current domain's labels); default is every entity token.
    """
    vocab = mixture.base.vocab
    tokens = gw.serialize_io(instruction, obs_triples, mixture.base.max_seq_len)
    y = mixture_forward(mixture, weights, vocab.encode(tokens))
    logits = action_logits(mixture.base, y).data
    verb_ids = np.array(vocab.verb_ids)
    if allowed_args is None:
        entity_ids = np.array(vocab.entity_ids)
    else:
        entity_ids = np.array(vocab.encode(list(allowed_args)))
    verb = vocab.tokens[verb_ids[int(np.argmax(logits[0, verb_ids]))]]
    arg = vocab.tokens[entity_ids[int(np.argmax(logits[1, entity_ids]))]]
    return gw.action_string(verb, arg)


def teacher_forcing_loss(mixture: Mixture, weights, demo: gw.Demonstration, step_indices=None) -> nc.Tensor:
    """Per-step cross-entropy, averaged over steps.

    Each step contributes the action-token mean and the next-observation
    token mean at equal weight; without the balance the handful of action
    tokens drowns in the observation stream and the policy never sharpens.
    """
    vocab = mixture.base.vocab
    losses = []
    indices = list(range(len(demo.steps))) if step_indices is None else list(step_indices)
    if not indices:
        raise ValueError("teacher_forcing_loss over an empty demonstration")
    for i in indices:
        obs, act, nxt = demo.steps[i]
        tokens = gw.serialize_io(demo.instruction, obs, mixture.base.max_seq_len)
        y = mixture_forward(mixture, weights, vocab.encode(tokens))
        act_ids = vocab.encode(gw.tokenize_action(act))
        act_term = nc.scale(nc.cross_entropy_rows(action_logits(mixture.base, y), act_ids), 0.5 / len(act_ids))
        nxt_ids = vocab.encode(gw.serialize_observation(nxt))
        obs_term = nc.scale(
            nc.cross_entropy_rows(observation_logits(mixture.base, y, len(nxt_ids)), nxt_ids), 0.5 / len(nxt_ids)
        )
        losses.append(nc.add(act_term, obs_term))
    acc = losses[0]
    for term in losses[1:]:
        acc = nc.add(acc, term)
    return nc.scale(acc, 1.0 / len(indices))


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    lr: float
    batch_size: int = 16
    warmup: int = 0
    min_lr: float = 0.0
    seed: int = 0


def _flatten_examples(demos):
    return [(d, i) for d in demos for i in range(len(d.steps))]


def _loss_over_batch(mixture, weights_fn, batch):
    """weights_fn(demo) -> (L, N) weights; loss averaged per token per item."""
    terms = []
    for demo, idx in batch:
        terms.append(teacher_forcing_loss(mixture, weights_fn(demo, idx), demo, [idx]))
    acc = terms[0]
    for t in terms[1:]:
        acc = nc.add(acc, t)
    return nc.scale(acc, 1.0 / len(terms))


def sgd_epochs(params, loss_of_step, cfg: TrainConfig):
    """Shared SGD loop: cosine schedule, per-step scalar loss history."""
    sched = nc.LrSchedule(cfg.lr, cfg.steps, cfg.warmup, cfg.min_lr) if cfg.steps > 0 else None
    history = []
    for step_i in range(cfg.steps):
        with nc.tape() as t:
            loss = loss_of_step(step_i)
        nc.backward(t, loss)
        nc.sgd_step(params, sched.lr_at(step_i))
        nc.zero_grads(params)
        history.append(loss.item())
    return history


def train_base(base: BaseModel, demos, cfg: TrainConfig):
    """Multi-task pretraining of the bare base model on pooled demos."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2017]))
    mixture = Mixture(base, [], [])
    zero = mixture.zero_weights()
    examples = _flatten_examples(demos)
    if not examples:
        raise ValueError("train_base needs at least one demonstration step")

    def loss_of_step(step_i):
        picks = rng.integers(len(examples), size=min(cfg.batch_size, len(examples)))
        batch = [examples[k] for k in picks]
        return _loss_over_batch(mixture, lambda d, i: zero, batch)

    return sgd_epochs(base.param_list(), loss_of_step, cfg)


def train_adapter(base: BaseModel, demos, rank: int, cfg: TrainConfig):
    """Specialize a fresh adapter on one domain's demonstrations."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2029]))
    adapter = Adapter(base.n_layers, base.d_h, rank, rng)
    mixture = Mixture(base, [adapter], [demos[0].domain_id if demos else "?"])
    one_hot = mixture.one_hot_weights(0)
    examples = _flatten_examples(demos)
    if not examples:
        raise ValueError("train_adapter needs at least one demonstration step")

    def loss_of_step(step_i):
        picks = rng.integers(len(examples), size=min(cfg.batch_size, len(examples)))
        batch = [examples[k] for k in picks]
        return _loss_over_batch(mixture, lambda d, i: one_hot, batch)

    history = sgd_epochs(adapter.param_list(), loss_of_step, cfg)
    return adapter, history


def joint_train_mixture(mixture: Mixture, route_weights_fn, demos, cfg: TrainConfig):
    """Fine-tune all adapters under live routing; router and base frozen.

    route_weights_fn(demo, step_index) -> (n_layers, n_experts) blend row
    per example, already top-K masked, so gradients stop at unselected
    experts by construction.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2039]))
    examples = _flatten_examples(demos)
    if not examples:
        raise ValueError("joint_train_mixture needs at least one demonstration step")

    def loss_of_step(step_i):
        picks = rng.integers(len(examples), size=min(cfg.batch_size, len(examples)))
        batch = [examples[k] for k in picks]
        return _loss_over_batch(mixture, route_weights_fn, batch)

    return sgd_epochs(mixture.adapter_params(), loss_of_step, cfg)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _vocab_fingerprint(vocab: gw.Vocab) -> str:
    import hashlib

    return hashlib.sha256("\x00".join(vocab.tokens).encode()).hexdigest()[:16]


def save_base(path: str, base: BaseModel):
    meta = {
        "n_layers": base.n_layers,
        "d_h": base.d_h,
        "max_seq_len": base.max_seq_len,
        "vocab": _vocab_fingerprint(base.vocab),
    }
    save_checkpoint(path, "base", meta, {k: v.data for k, v in base.params.items()})


def load_base(path: str, vocab: gw.Vocab) -> BaseModel:
    _, meta, arrays = load_checkpoint(path, "base")
    if meta["vocab"] != _vocab_fingerprint(vocab):
        raise ValueError("base checkpoint was built against a different vocabulary")
    base = BaseModel(vocab, meta["n_layers"], meta["d_h"], meta["max_seq_len"], np.random.default_rng(0))
    for k in base.params:
        base.params[k].data = arrays[k]
    return base


def save_mixture(path: str, mixture: Mixture):
    base = mixture.base
    meta = {
        "n_layers": base.n_layers,
        "d_h": base.d_h,
        "max_seq_len": base.max_seq_len,
        "vocab": _vocab_fingerprint(base.vocab),
        "rank": mixture.adapters[0].rank if mixture.adapters else 0,
        "domain_ids": list(mixture.domain_ids),
    }
    arrays = {f"base/{k}": v.data for k, v in base.params.items()}
    for j, adapter in enumerate(mixture.adapters):
        for k, v in adapter.params.items():
            arrays[f"expert{j}/{k}"] = v.data
    save_checkpoint(path, "mixture", meta, arrays)


def load_mixture(path: str, vocab: gw.Vocab) -> Mixture:
    _, meta, arrays = load_checkpoint(path, "mixture")
    if meta["vocab"] != _vocab_fingerprint(vocab):
        raise ValueError("mixture checkpoint was built against a different vocabulary")
    base = BaseModel(vocab, meta["n_layers"], meta["d_h"], meta["max_seq_len"], np.random.default_rng(0))
    for k in base.params:
        base.params[k].data = arrays[f"base/{k}"]
    adapters = []
    for j in range(len(meta["domain_ids"])):
        a = Adapter(meta["n_layers"], meta["d_h"], meta["rank"], np.random.default_rng(0))
        for k in a.params:
            a.params[k].data = arrays[f"expert{j}/{k}"]
        adapters.append(a)
    return Mixture(base, adapters, list(meta["domain_ids"]))
