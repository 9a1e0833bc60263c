"""Grow a mixture by one domain from a handful of demonstrations.

The new expert's low-rank factors start as a routing-weighted blend of the
existing experts' factors (distillation) and are then fine-tuned on the few
shots; a prototype row for the new domain is appended from its mean
embedding. Compare the distilled start against a from-scratch expert.
"""

import numpy as np

from worldmix import adapt as ad
from worldmix import graphworld as gw
from worldmix import router as rt
from worldmix import worldmodel as wm


def main():
    vocab = gw.Vocab()
    domains = gw.seen_domain_specs(seed=0, count=3)
    demos = gw.gen_demos(domains, seed=0, episodes_per_domain=8)
    grouped = {}
    for demo in demos:
        grouped.setdefault(demo.domain_id, []).append(demo)
    by_domain = {d.domain_id: (d, grouped[d.domain_id]) for d in domains}

    base = wm.BaseModel(vocab, n_layers=4, d_h=32, max_seq_len=160, rng=np.random.default_rng(1))
    wm.train_base(base, demos, wm.TrainConfig(steps=80, lr=0.05, batch_size=16, warmup=10, seed=1))
    adapters = []
    for d in domains:
        adapter, _ = wm.train_adapter(
            base, grouped[d.domain_id], rank=3,
            cfg=wm.TrainConfig(steps=200, lr=0.3, batch_size=16, warmup=20, seed=gw._stable_id(d.domain_id))
        )
        adapters.append(adapter)
    mixture = wm.Mixture(base, adapters, [d.domain_id for d in domains])

    processor = rt.GraphProcessor(vocab, 4, gw.FEATURE_DIM, 24, 12, np.random.default_rng(3))
    prototypes = rt.extract_prototypes(processor, by_domain)

    new_domain = gw.unseen_domain_specs(seed=0, count=1)[0]
    shots = [gw.demonstrate(new_domain, gw.sample_episode(new_domain, np.random.default_rng(50 + j))) for j in range(5)]
    print(f"augmenting with {new_domain.domain_id} from {len(shots)} demonstrations")

    for init in ("distill", "scratch"):
        cfg = ad.AugmentConfig(k=2, temperature=1.0, finetune_steps=120, lr=0.3, batch_size=8, seed=0, init=init)
        grown, protos2, report = ad.augment_model(mixture, processor, prototypes, new_domain, shots, cfg)
        print(f"  {init:8s} experts {mixture.n_experts} -> {grown.n_experts}  "
              f"finetune loss {report['loss_first']:.3f} -> {report['loss_last']:.3f}")
        assert protos2.n_experts == prototypes.n_experts + 1

    print("existing mixture and prototypes are untouched:", mixture.n_experts, prototypes.n_experts)


if __name__ == "__main__":
    main()
