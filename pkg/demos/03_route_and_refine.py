"""Route observations to experts and refine prototypes at test time.

A graph processor embeds instruction-conditioned scene graphs at every
layer; per-domain prototypes are mean embeddings; routing softmaxes the
top-K prototype cosines layer by layer. On an unfamiliar domain, refinement
drags the matched prototypes toward the mixture of their neighbors.
"""

import numpy as np

from worldmix import adapt as ad
from worldmix import graphworld as gw
from worldmix import router as rt


def main():
    vocab = gw.Vocab()
    domains = gw.seen_domain_specs(seed=0, count=4)
    demos = gw.gen_demos(domains, seed=0, episodes_per_domain=6)
    grouped = {}
    for demo in demos:
        grouped.setdefault(demo.domain_id, []).append(demo)
    by_domain = {d.domain_id: (d, grouped[d.domain_id]) for d in domains}

    processor = rt.GraphProcessor(vocab, n_layers=4, d_v=gw.FEATURE_DIM, d_h=24, d_proj=12,
                                  rng=np.random.default_rng(3))
    pool = rt.demo_pool(by_domain)
    hist = rt.contrastive_pretrain(
        processor, pool, rt.ContrastiveConfig(steps=300, lr=0.03, batch_size=16, tau_c=0.1, lam=1.0, warmup=30, seed=4)
    )
    print(f"contrastive pretraining: loss {np.mean(hist[:20]):.3f} -> {np.mean(hist[-20:]):.3f}")

    prototypes = rt.extract_prototypes(processor, by_domain)
    print(f"prototypes: {prototypes.n_experts} experts x {prototypes.n_layers} layers")

    probe = domains[1]
    demo = grouped[probe.domain_id][0]
    graph = gw.graph_from_triples(probe, demo.steps[0][0])
    embeddings = rt.pooled_embeddings(processor, graph, demo.instruction)
    decision = rt.route(embeddings, prototypes, k=2, temperature=1.0)
    print(f"\nrouting a {probe.domain_id} observation (final layer):")
    for j, did in enumerate(prototypes.domain_ids):
        print(f"  {did:20s} cos {decision.raw[-1][j]:+.3f}  weight {decision.weights[-1][j]:.3f}")

    refined = ad.refine_prototypes(prototypes, embeddings, ad.RefinementConfig(alpha=0.5, tau_r=1.0))
    moved = [float(np.linalg.norm(refined.layers[l] - prototypes.layers[l])) for l in range(prototypes.n_layers)]
    print(f"\nrefinement displacement per layer: {np.round(moved, 4)}")
    again = rt.route(embeddings, refined, k=2, temperature=1.0)
    print(f"entropy before {-(decision.weights[-1][decision.weights[-1] > 0] * np.log(decision.weights[-1][decision.weights[-1] > 0])).sum():.3f} "
          f"after {-(again.weights[-1][again.weights[-1] > 0] * np.log(again.weights[-1][again.weights[-1] > 0])).sum():.3f}")


if __name__ == "__main__":
    main()
