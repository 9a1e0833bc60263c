"""Graph processor, per-expert prototypes, and multi-granular routing.

The processor is a layer stack matched one-to-one with the base model's
layers. At indices {0, L/4, L/2, 3L/4} it runs instruction-gated message
passing over the scene graph:

    gate = relu((Q_H Q_i^T)(K_H K_i^T)^T / sqrt(d))
    E~   = (A + I) . R . gate          (elementwise)
    H'   = sigmoid(D^-1/2 E~ D^-1/2 (H W_m) W_u)

and plain dense layers sigmoid((H W_m) W_u) elsewhere. Mean-pooled per-layer
node embeddings are matched against per-expert prototypes by cosine, and the
top-K scores per layer are softmaxed into blend weights.

Pretraining is contrastive over two augmented views of each scene graph: an
instance-discrimination term plus a domain-clustering term, weighted by
lambda. Prototypes are per-layer means of the pooled embeddings over each
domain's demonstrations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import graphworld as gw
from . import nncore as nc
from .checkpoints import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


def mp_layer_indices(n_layers: int) -> tuple:
    """Message-passing layer positions: {0, L/4, L/2, 3L/4}."""
    if n_layers < 1:
        raise ValueError(f"n_layers must be >= 1, got {n_layers}")
    return tuple(sorted({0, n_layers // 4, n_layers // 2, (3 * n_layers) // 4}))


def _semi_orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    """Scaled matrix with orthonormal rows or columns (whichever fit)."""
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q


class GraphProcessor:
    """Instruction-conditioned scene-graph encoder with per-layer pooling."""

    # semi-orthogonal layer init: orthonormal directions carry the pooled
    # geometry through depth instead of scrambling it, and the gain product
    # of 4 offsets the sigmoid's 1/4 slope so the differential signal
    # neither collapses nor saturates layer to layer. Gaussian init loses
    # domain distinguishability almost completely by the final layer.
    GAIN_MESSAGE = 2.0
    GAIN_UPDATE = 2.0

    def __init__(self, vocab: gw.Vocab, n_layers: int, d_v: int, d_h: int, d_proj: int, rng: np.random.Generator):
        self.vocab = vocab
        self.n_layers = n_layers
        self.d_v = d_v
        self.d_h = d_h
        self.d_proj = d_proj
        self.mp_layers = mp_layer_indices(n_layers)
        # unit-scale rows give the softplus embedding a wide positive spread
        self.encoder = gw.InstructionEncoder(vocab, d_h, rng, scale=1.0)
        self.params = {"instruction_table": self.encoder.table}
        # constant projector that removes the coordinate mean of a pooled row;
        # sigmoid outputs share a large all-ones component that would swamp
        # the cosine otherwise
        self._center = nc.Tensor(np.eye(d_h) - np.ones((d_h, d_h)) / d_h)
        for l in range(n_layers):
            d_in = d_v if l == 0 else d_h
            self.params[f"w_m_{l}"] = nc.Tensor(_semi_orthogonal(rng, d_in, d_h, self.GAIN_MESSAGE), requires_grad=True)
            self.params[f"w_u_{l}"] = nc.Tensor(_semi_orthogonal(rng, d_h, d_h, self.GAIN_UPDATE), requires_grad=True)
            if l in self.mp_layers:
                # raw parameters; adjust() maps them through softplus so the
                # effective projections stay strictly positive however far
                # training moves them (see the degeneracy note in mpnn_layer)
                for name, rows in (("w_qh", d_in), ("w_kh", d_in), ("w_qi", d_h), ("w_ki", d_h)):
                    init = rng.normal(size=(rows, d_proj))
                    self.params[f"{name}_{l}"] = nc.Tensor(init, requires_grad=True)

    def param_list(self):
        return list(self.params.values())

    def gate_weight(self, name: str, layer: int) -> nc.Tensor:
        """Effective (strictly positive) projection for the edge gate."""
        return nc.softplus(self.params[f"{name}_{layer}"])

    def instruction_embedding(self, instruction) -> nc.Tensor:
        """Strictly positive embedding rows for the instruction tokens."""
        return nc.softplus(self.encoder.encode(instruction))


def adjust(processor: GraphProcessor, layer: int, h: nc.Tensor, phi: nc.Tensor) -> nc.Tensor:
    """Instruction-conditioned edge gate for one message-passing layer.

    With non-negative h and phi the positive effective projections make
    every gate entry strictly positive, so trained processors never produce
    a degenerate context graph on a real observation.
    """
    if layer not in processor.mp_layers:
        raise ValueError(f"layer {layer} is not a message-passing layer {processor.mp_layers}")
    q_h = nc.matmul(h, processor.gate_weight("w_qh", layer))
    q_i = nc.matmul(phi, processor.gate_weight("w_qi", layer))
    k_h = nc.matmul(h, processor.gate_weight("w_kh", layer))
    k_i = nc.matmul(phi, processor.gate_weight("w_ki", layer))
    left = nc.matmul(q_h, nc.transpose(q_i))
    right = nc.matmul(k_h, nc.transpose(k_i))
    raw = nc.scale(nc.matmul(left, nc.transpose(right)), 1.0 / np.sqrt(processor.d_proj))
    return nc.relu(raw)


def context_edge_matrix(graph: gw.ObservationGraph, gate: nc.Tensor) -> nc.Tensor:
    """(A + I) . R . gate, all elementwise."""
    struct = (graph.A + np.eye(graph.n)) * graph.R
    return nc.hadamard(nc.Tensor(struct), gate)


def mpnn_layer(processor: GraphProcessor, layer: int, h: nc.Tensor, graph: gw.ObservationGraph, phi: nc.Tensor) -> nc.Tensor:
    """One gated message-passing layer; rejects degenerate context graphs."""
    gate = adjust(processor, layer, h, phi)
    e_tilde = context_edge_matrix(graph, gate)
    degrees = e_tilde.data.sum(axis=1)
    dead = np.where(degrees <= 0)[0]
    if dead.size:
        raise ValueError(
            f"degenerate context graph at layer {layer}: node {graph.labels[int(dead[0])]!r} "
            "has no positively gated edges"
        )
    norm = nc.degree_normalize(e_tilde)
    msg = nc.matmul(h, processor.params[f"w_m_{layer}"])
    return nc.sigmoid(nc.matmul(nc.matmul(norm, msg), processor.params[f"w_u_{layer}"]))


def dense_layer(processor: GraphProcessor, layer: int, h: nc.Tensor) -> nc.Tensor:
    p = processor.params
    return nc.sigmoid(nc.matmul(nc.matmul(h, p[f"w_m_{layer}"]), p[f"w_u_{layer}"]))


def forward_processor(processor: GraphProcessor, graph: gw.ObservationGraph, instruction):
    """Per-layer pooled embeddings of (graph, instruction); length L.

    The readout mean-pools the node embeddings and then removes the
    coordinate mean of the pooled row.
    """
    if graph.V.shape[1] != processor.d_v:
        raise ValueError(f"graph feature dim {graph.V.shape[1]} does not match d_v {processor.d_v}")
    phi = processor.instruction_embedding(instruction)
    h = nc.Tensor(graph.V)
    pooled = []
    for l in range(processor.n_layers):
        h = mpnn_layer(processor, l, h, graph, phi) if l in processor.mp_layers else dense_layer(processor, l, h)
        pooled.append(nc.matmul(nc.mean_rows(h), processor._center))
    return pooled


def pooled_embeddings(processor: GraphProcessor, graph: gw.ObservationGraph, instruction) -> np.ndarray:
    """(L, d_h) numpy stack of the per-layer pooled embeddings, no tape."""
    return np.stack([e.data for e in forward_processor(processor, graph, instruction)])


# ---------------------------------------------------------------------------
# prototypes
# ---------------------------------------------------------------------------


@dataclass
class PrototypeSet:
    """Per-layer, per-expert prototype vectors: layers[l] is (N, d_h)."""

    domain_ids: list
    layers: list  # list of (N, d_h) arrays, length L

    @property
    def n_experts(self):
        return len(self.domain_ids)

    @property
    def n_layers(self):
        return len(self.layers)

    def clone(self) -> "PrototypeSet":
        return PrototypeSet(list(self.domain_ids), [p.copy() for p in self.layers])


def extract_prototypes(processor: GraphProcessor, demos_by_domain: dict, relation_weights=None) -> PrototypeSet:
    """Mean pooled embedding over every step observation of each domain.

    demos_by_domain maps domain_id -> (DomainSpec, [Demonstration]); expert
    order follows the dict's insertion order.
    """
    domain_ids = list(demos_by_domain.keys())
    layers = None
    for d_idx, domain_id in enumerate(domain_ids):
        domain, demos = demos_by_domain[domain_id]
        if not demos:
            raise ValueError(f"no demonstrations for domain {domain_id}")
        acc = None
        count = 0
        for demo in demos:
            for obs, _act, _nxt in demo.steps:
                graph = gw.graph_from_triples(domain, obs, relation_weights)
                emb = pooled_embeddings(processor, graph, demo.instruction)
                acc = emb if acc is None else acc + emb
                count += 1
        mean = acc / count
        if layers is None:
            layers = [np.zeros((len(domain_ids), processor.d_h)) for _ in range(processor.n_layers)]
        for l in range(processor.n_layers):
            layers[l][d_idx] = mean[l]
    return PrototypeSet(domain_ids, layers)


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoutingDecision:
    raw: np.ndarray  # (L, N) cosine scores
    weights: np.ndarray  # (L, N) blend weights: top-K softmax rows, zeros elsewhere
    k_requested: int
    k_used: int
    temperature: float
    clamped: bool


def _cosine_rows(v: np.ndarray, mat: np.ndarray) -> np.ndarray:
    nv = np.linalg.norm(v)
    nm = np.linalg.norm(mat, axis=1)
    if nv == 0 or np.any(nm == 0):
        raise ValueError("cosine against a zero-norm vector is undefined")
    return np.clip(mat @ v / (nm * nv), -1.0, 1.0)


def route(embeddings, prototypes: PrototypeSet, k: int, temperature: float) -> RoutingDecision:
    """Top-K blend weights per layer from per-layer cosine scores.

    embeddings is the (L, d_h) stack for the current (graph, instruction);
    ties keep the lowest expert index; k > N clamps with a logged warning.
    """
    if not temperature > 0:
        raise ValueError(f"routing temperature must be > 0, got {temperature}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = prototypes.n_experts
    n_layers = prototypes.n_layers
    embeddings = np.asarray(embeddings)
    if embeddings.shape[0] != n_layers:
        raise ValueError(f"expected {n_layers} embedding rows, got {embeddings.shape[0]}")
    clamped = k > n
    if clamped:
        logger.warning("route: k=%d exceeds the expert count %d; clamping", k, n)
    k_used = min(k, n)
    raw = np.zeros((n_layers, n))
    weights = np.zeros((n_layers, n))
    for l in range(n_layers):
        scores = _cosine_rows(embeddings[l], prototypes.layers[l])
        raw[l] = scores
        order = np.lexsort((np.arange(n), -scores))  # score desc, index asc on ties
        kept = np.sort(order[:k_used])
        sub = nc.softmax(nc.Tensor(scores[kept]), temperature).data
        weights[l, kept] = sub
    return RoutingDecision(raw, weights, k, k_used, temperature, clamped)


def route_observation(processor, prototypes, graph, instruction, k, temperature):
    """Convenience: embeddings plus the routing decision for one observation."""
    emb = pooled_embeddings(processor, graph, instruction)
    return emb, route(emb, prototypes, k, temperature)


# ---------------------------------------------------------------------------
# graph augmentation
# ---------------------------------------------------------------------------


def augment_graph(graph: gw.ObservationGraph, seed: int, feature_rate: float = 0.1, edge_rate: float = 0.2) -> gw.ObservationGraph:
    """Stochastic view for contrastive pretraining; deterministic in seed.

    Anonymizes non-agent nodes at feature_rate (their kind and state bits are
    masked; the entity-type bits survive, so every edge gate stays positive)
    and removes symmetric edge pairs at edge_rate. The agent node and the R
    diagonal are never touched, so rates of zero return the graph unchanged.
    """
    for name, rate in (("feature_rate", feature_rate), ("edge_rate", edge_rate)):
        if not 0 <= rate < 1:
            raise ValueError(f"{name} must be in [0, 1), got {rate}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4099]))
    v = graph.V.copy()
    a = graph.A.copy()
    r = graph.R.copy()
    agent = graph.labels.index("agent")
    if feature_rate > 0:
        drop = rng.random(graph.n) < feature_rate
        drop[agent] = False
        v[drop, len(gw.ENTITY_TYPES):] = 0.0
    if edge_rate > 0:
        iu, ju = np.where(np.triu(a, 1) > 0)
        gone = rng.random(iu.size) < edge_rate
        for i, j in zip(iu[gone], ju[gone]):
            a[i, j] = a[j, i] = 0.0
            r[i, j] = r[j, i] = 0.0
    return gw.ObservationGraph(graph.labels, v, a, r)


# ---------------------------------------------------------------------------
# contrastive pretraining
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContrastiveConfig:
    steps: int
    lr: float
    batch_size: int = 8
    tau_c: float = 0.1
    lam: float = 1.0
    warmup: int = 0
    min_lr: float = 0.0
    seed: int = 0
    feature_rate: float = 0.1
    edge_rate: float = 0.2
    layers: str = "final"  # "final" or "all"
    depth_weight: float = 0.0


def contrastive_loss(processor, items, tau_c: float, lam: float, seeds, feature_rate: float = 0.1, edge_rate: float = 0.2, layers: str = "final", depth_weight: float = 0.0):
    """Two-view InfoNCE plus domain clustering on pooled embeddings.

    items: list of (graph, instruction, domain_id); seeds: per-item (s1, s2)
    augmentation seeds. lam = 0 skips the clustering term entirely, so the
    result is bitwise the instance term alone. layers="final" scores the last
    pooled embedding only; layers="all" averages the objective over every
    layer's pooled embedding, which gives each layer a direct gradient path
    instead of one routed through the whole saturating stack. depth_weight
    tilts that average toward deep layers (layer l carries 1 + depth_weight*l
    before normalization); 0 keeps the plain mean, and it has no effect when
    layers="final".
    """
    if not tau_c > 0:
        raise ValueError(f"tau_c must be > 0, got {tau_c}")
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    if layers not in ("final", "all"):
        raise ValueError(f"layers must be 'final' or 'all', got {layers!r}")
    if depth_weight < 0:
        raise ValueError(f"depth_weight must be >= 0, got {depth_weight}")
    domains = [d for _, _, d in items]
    if lam > 0 and len(set(domains)) < 2:
        raise ValueError("domain clustering needs at least two distinct domains in the batch (or lam=0)")
    b = len(items)
    z1, z2 = [], []
    for (graph, instruction, _), (s1, s2) in zip(items, seeds):
        for seed, bucket in ((s1, z1), (s2, z2)):
            view = augment_graph(graph, seed, feature_rate, edge_rate)
            try:
                embs = forward_processor(processor, view, instruction)
            except ValueError:
                # an augmentation stripped some node of every gated edge;
                # fall back to the intact graph for this view
                embs = forward_processor(processor, graph, instruction)
            bucket.append(embs if layers == "all" else embs[-1:])
    n_scored = len(z1[0])
    lw = [1.0 + depth_weight * l for l in range(n_scored)]
    norm = 1.0 / (b * sum(lw))
    inst_terms = []
    clus_terms = []
    for l in range(n_scored):
        for n_i in range(b):
            sims = nc.stack([nc.cosine_similarity(z1[m][l], z2[n_i][l]) for m in range(b)])
            logits = nc.scale(sims, 1.0 / tau_c)
            inst_terms.append(nc.scale(nc.cross_entropy(logits, n_i), lw[l]))
            if lam > 0:
                mask = np.array([1.0 if domains[m] == domains[n_i] else 0.0 for m in range(b)])
                p = nc.softmax(logits, 1.0)
                inside = nc.sum_all(nc.hadamard(p, nc.Tensor(mask)))
                clus_terms.append(nc.scale(nc.log(inside), -lw[l]))
    inst = nc.scale(_sum_terms(inst_terms), norm)
    if lam == 0:
        return inst
    clus = nc.scale(_sum_terms(clus_terms), norm)
    return nc.add(nc.scale(inst, 1.0 / (lam + 1.0)), nc.scale(clus, lam / (lam + 1.0)))


def _sum_terms(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = nc.add(acc, t)
    return acc


def contrastive_pretrain(processor: GraphProcessor, pool, cfg: ContrastiveConfig):
    """SGD over the contrastive objective; pool is [(graph, instruction, domain_id)]."""
    if not pool:
        raise ValueError("contrastive_pretrain needs a non-empty pool")
    if cfg.lam > 0 and len({d for _, _, d in pool}) < 2:
        raise ValueError("pool holds a single domain; clustering is degenerate (set lam=0)")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3011]))
    sched = nc.LrSchedule(cfg.lr, cfg.steps, cfg.warmup, cfg.min_lr) if cfg.steps > 0 else None
    params = processor.param_list()
    history = []
    for step_i in range(cfg.steps):
        while True:
            picks = rng.integers(len(pool), size=min(cfg.batch_size, len(pool)))
            items = [pool[j] for j in picks]
            if cfg.lam == 0 or len({d for _, _, d in items}) >= 2:
                break
        seeds = [(int(rng.integers(2**31)), int(rng.integers(2**31))) for _ in items]
        with nc.tape() as t:
            loss = contrastive_loss(processor, items, cfg.tau_c, cfg.lam, seeds, cfg.feature_rate, cfg.edge_rate, cfg.layers, cfg.depth_weight)
        nc.backward(t, loss)
        nc.sgd_step(params, sched.lr_at(step_i))
        nc.zero_grads(params)
        history.append(loss.item())
    return history


def demo_pool(demos_by_domain: dict, relation_weights=None):
    """Flatten domain demos into contrastive items, one per step observation."""
    pool = []
    for domain_id, (domain, demos) in demos_by_domain.items():
        for demo in demos:
            for obs, _act, _nxt in demo.steps:
                pool.append((gw.graph_from_triples(domain, obs, relation_weights), demo.instruction, domain_id))
    return pool


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_processor(path: str, processor: GraphProcessor):
    meta = {
        "n_layers": processor.n_layers,
        "d_v": processor.d_v,
        "d_h": processor.d_h,
        "d_proj": processor.d_proj,
    }
    save_checkpoint(path, "router", meta, {k: v.data for k, v in processor.params.items()})


def load_processor(path: str, vocab: gw.Vocab) -> GraphProcessor:
    _, meta, arrays = load_checkpoint(path, "router")
    proc = GraphProcessor(vocab, meta["n_layers"], meta["d_v"], meta["d_h"], meta["d_proj"], np.random.default_rng(0))
    for k in proc.params:
        proc.params[k].data = arrays[k]
    return proc


def save_prototypes(path: str, protos: PrototypeSet):
    meta = {"domain_ids": list(protos.domain_ids)}
    arrays = {f"layer{l}": protos.layers[l] for l in range(protos.n_layers)}
    save_checkpoint(path, "prototypes", meta, arrays)


def load_prototypes(path: str) -> PrototypeSet:
    _, meta, arrays = load_checkpoint(path, "prototypes")
    layers = [arrays[f"layer{l}"] for l in range(len(arrays))]
    return PrototypeSet(list(meta["domain_ids"]), layers)
