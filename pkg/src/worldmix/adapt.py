"""Test-time adaptation: prototype refinement and distilled expert augmentation."""

import logging
from dataclasses import dataclass

import numpy as np

from . import graphworld as gw
from . import nncore as nc
from . import router as rt
from . import worldmodel as wm

logger = logging.getLogger(__name__)

PERSISTENCE_MODES = ("episode", "persist")


# ---------------------------------------------------------------------------
# prototype refinement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RefinementConfig:
    alpha: float = 0.5
    tau_r: float = 1.0
    # "episode" resets prototypes between episodes, "persist" carries the
    # refined set forward
    persistence: str = "episode"
    # the exact update can overshoot when cos(emb, p_j) < 0; clamp restricts
    # the interpolation coefficient to [0, 1]
    clamp: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.tau_r > 0:
            raise ValueError(f"tau_r must be > 0, got {self.tau_r}")
        if self.persistence not in PERSISTENCE_MODES:
            raise ValueError(f"persistence must be one of {PERSISTENCE_MODES}, got {self.persistence!r}")


def refinement_weights(protos: np.ndarray, tau_r: float) -> np.ndarray:
    """Row-stochastic prototype affinity: softmax of pairwise cosines at tau_r."""
    if not tau_r > 0:
        raise ValueError(f"tau_r must be > 0, got {tau_r}")
    p = np.asarray(protos, dtype=float)
    norms = np.linalg.norm(p, axis=1)
    if np.any(norms == 0):
        raise ValueError("refinement is undefined for a zero-norm prototype")
    sims = np.clip((p @ p.T) / np.outer(norms, norms), -1.0, 1.0)
    out = np.zeros_like(sims)
    for j in range(p.shape[0]):
        out[j] = nc.softmax(nc.Tensor(sims[j]), tau_r).data
    return out


def refine_prototypes(protos: rt.PrototypeSet, embeddings, cfg: RefinementConfig) -> rt.PrototypeSet:
    """One simultaneous refinement step toward the observation embedding.

    Every expert row of every layer is updated from the pre-step values;
    alpha = 0 returns a bit-identical clone.
    """
    if cfg.alpha == 0.0:
        return protos.clone()
    embeddings = np.asarray(embeddings)
    if embeddings.shape[0] != protos.n_layers:
        raise ValueError(f"expected {protos.n_layers} embedding rows, got {embeddings.shape[0]}")
    new_layers = []
    for l in range(protos.n_layers):
        p = protos.layers[l]
        rbar = refinement_weights(p, cfg.tau_r)
        delta = rbar @ p
        sims = rt._cosine_rows(embeddings[l], p)
        coef = cfg.alpha * sims
        if cfg.clamp:
            coef = np.clip(coef, 0.0, 1.0)
        new_layers.append((1.0 - coef)[:, None] * p + coef[:, None] * delta)
    return rt.PrototypeSet(list(protos.domain_ids), new_layers)


# ---------------------------------------------------------------------------
# graph combination
# ---------------------------------------------------------------------------


def combined_graph(g1: gw.ObservationGraph, g2: gw.ObservationGraph) -> gw.ObservationGraph:
    """Merge two observation graphs by node label.

    Nodes take the union (sorted by label); features of shared labels are
    averaged; adjacency is the union and relation weights take the
    elementwise maximum.
    """
    if g1.V.shape[1] != g2.V.shape[1]:
        raise ValueError(f"feature dims differ: {g1.V.shape[1]} vs {g2.V.shape[1]}")
    labels = sorted(set(g1.labels) | set(g2.labels))
    idx1 = {lab: i for i, lab in enumerate(g1.labels)}
    idx2 = {lab: i for i, lab in enumerate(g2.labels)}
    n = len(labels)
    v = np.zeros((n, g1.V.shape[1]))
    for i, lab in enumerate(labels):
        if lab in idx1 and lab in idx2:
            v[i] = (g1.V[idx1[lab]] + g2.V[idx2[lab]]) / 2.0
        elif lab in idx1:
            v[i] = g1.V[idx1[lab]]
        else:
            v[i] = g2.V[idx2[lab]]
    a = np.zeros((n, n))
    r = np.zeros((n, n))
    for src, idx in ((g1, idx1), (g2, idx2)):
        rows = [idx.get(lab, -1) for lab in labels]
        for i, ri in enumerate(rows):
            if ri < 0:
                continue
            for j, rj in enumerate(rows):
                if rj < 0:
                    continue
                a[i, j] = max(a[i, j], src.A[ri, rj])
                r[i, j] = max(r[i, j], src.R[ri, rj])
    return gw.ObservationGraph(tuple(labels), v, a, r)


# ---------------------------------------------------------------------------
# distilled expert initialization
# ---------------------------------------------------------------------------


def distill_init(mixture: wm.Mixture, weights) -> wm.Adapter:
    """New adapter whose factors are per-layer convex combinations.

    weights is (L, N); layer l of the new adapter blends the existing
    adapters' (down, up) factors with the row weights[l]. Source adapters
    are never modified.
    """
    weights = np.asarray(weights, dtype=float)
    base = mixture.base
    if weights.shape != (base.n_layers, mixture.n_experts):
        raise ValueError(f"weights shape {weights.shape} does not match (L, N) = ({base.n_layers}, {mixture.n_experts})")
    if mixture.n_experts == 0:
        raise ValueError("cannot distill from an empty mixture")
    rank = mixture.adapters[0].rank
    out = wm.Adapter(base.n_layers, base.d_h, rank, np.random.default_rng(0))
    for l in range(base.n_layers):
        down = np.zeros((base.d_h, rank))
        up = np.zeros((rank, base.d_h))
        for j, ad in enumerate(mixture.adapters):
            down = down + weights[l, j] * ad.params[f"down_{l}"].data
            up = up + weights[l, j] * ad.params[f"up_{l}"].data
        out.params[f"down_{l}"].data = down
        out.params[f"up_{l}"].data = up
    return out


# ---------------------------------------------------------------------------
# model augmentation
# ---------------------------------------------------------------------------


INIT_MODES = ("distill", "scratch")


@dataclass(frozen=True)
class AugmentConfig:
    k: int = 3
    temperature: float = 1.0
    finetune_steps: int = 200
    lr: float = 0.05
    batch_size: int = 16
    warmup: int = 0
    min_lr: float = 0.0
    seed: int = 0
    # "distill" blends the routed experts' factors; "scratch" starts from a
    # fresh zero-delta adapter (ablation baseline)
    init: str = "distill"

    def __post_init__(self):
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}, got {self.init!r}")


def _mean_demo_embeddings(processor, domain: gw.DomainSpec, demos, relation_weights=None) -> np.ndarray:
    acc = None
    count = 0
    for demo in demos:
        for obs, _act, _nxt in demo.steps:
            graph = gw.graph_from_triples(domain, obs, relation_weights)
            emb = rt.pooled_embeddings(processor, graph, demo.instruction)
            acc = emb if acc is None else acc + emb
            count += 1
    if count == 0:
        raise ValueError(f"no demonstration steps for domain {domain.domain_id}")
    return acc / count


def _finetune(base: wm.BaseModel, adapter: wm.Adapter, domain_id: str, demos, cfg: AugmentConfig):
    """T steps of SGD on the new adapter alone; base stays frozen."""
    single = wm.Mixture(base, [adapter], [domain_id])
    one_hot = single.one_hot_weights(0)
    examples = [(d, i) for d in demos for i in range(len(d.steps))]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5077]))
    train_cfg = wm.TrainConfig(
        steps=cfg.finetune_steps,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        warmup=cfg.warmup,
        min_lr=cfg.min_lr,
        seed=cfg.seed,
    )

    def loss_of_step(step_i):
        picks = rng.integers(len(examples), size=min(train_cfg.batch_size, len(examples)))
        terms = [wm.teacher_forcing_loss(single, one_hot, examples[k][0], [examples[k][1]]) for k in picks]
        acc = terms[0]
        for t in terms[1:]:
            acc = nc.add(acc, t)
        return nc.scale(acc, 1.0 / len(terms))

    return wm.sgd_epochs(adapter.param_list(), loss_of_step, train_cfg)


def augment_model(
    mixture: wm.Mixture,
    processor,
    prototypes: rt.PrototypeSet,
    domain: gw.DomainSpec,
    demos,
    cfg: AugmentConfig,
    relation_weights=None,
):
    """Grow the mixture by one distilled expert from a handful of demos.

    Returns (new_mixture, new_prototypes, report). The inputs are not
    modified: existing adapters and prototype rows are carried over
    unchanged, and the new expert/prototype rows are appended.
    """
    if domain.domain_id in mixture.domain_ids:
        raise ValueError(f"domain {domain.domain_id} is already in the mixture")
    if not demos:
        raise ValueError("augmentation needs at least one demonstration")
    mean_emb = _mean_demo_embeddings(processor, domain, demos, relation_weights)
    decision = rt.route(mean_emb, prototypes, cfg.k, cfg.temperature)
    if cfg.init == "distill":
        adapter = distill_init(mixture, decision.weights)
    else:
        rank = mixture.adapters[0].rank if mixture.adapters else 4
        adapter = wm.Adapter(mixture.base.n_layers, mixture.base.d_h, rank, np.random.default_rng(np.random.SeedSequence([cfg.seed, 5081])))
    history = _finetune(mixture.base, adapter, domain.domain_id, demos, cfg) if cfg.finetune_steps > 0 else []
    new_mixture = wm.Mixture(mixture.base, list(mixture.adapters) + [adapter], list(mixture.domain_ids) + [domain.domain_id])
    new_layers = [np.vstack([prototypes.layers[l], mean_emb[l][None, :]]) for l in range(prototypes.n_layers)]
    new_protos = rt.PrototypeSet(list(prototypes.domain_ids) + [domain.domain_id], new_layers)
    report = {
        "domain_id": domain.domain_id,
        "demos": len(demos),
        "steps": sum(len(d.steps) for d in demos),
        "init": cfg.init,
        "k_used": decision.k_used,
        "clamped": decision.clamped,
        "distill_weights": decision.weights.tolist(),
        "finetune_steps": cfg.finetune_steps,
        "loss_first": history[0] if history else None,
        "loss_last": history[-1] if history else None,
        "history": list(history),
    }
    return new_mixture, new_protos, report
