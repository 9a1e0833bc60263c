"""Mixture-of-world-models toolkit.

A small layered base model is specialized into per-domain experts through
low-rank adapters, a graph processor routes among them layer by layer from
observation-graph embeddings matched against per-expert prototypes, the
prototypes refine themselves at test time, and distilled experts extend the
mixture to novel domains from a handful of demonstrations.

Modules:
    nncore      tape autodiff engine, SGD, lr schedules
    graphworld  synthetic embodied environment, datasets, serialization
    worldmodel  base model, adapters, mixture forward and training
    router      graph processor, prototypes, top-K routing, pretraining
    adapt       test-time prototype refinement and model augmentation
    harness     episodes, metrics, scenarios, ablations, reports
    cli         TOML run configs and pipeline subcommands
"""

__version__ = "0.1.0"
