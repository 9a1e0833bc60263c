"""Evaluation harness: rollouts, scenario suites, ablations, and reports."""

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import adapt as ad
from . import graphworld as gw
from . import router as rt
from . import worldmodel as wm

logger = logging.getLogger(__name__)

WEIGHT_MODES = ("per_layer", "first_mp", "final")

METRIC_COLUMNS = (
    "scenario",
    "variant",
    "split",
    "domain_id",
    "seed",
    "k",
    "episodes",
    "sr",
    "ps",
    "entropy_first",
    "entropy_final",
    "entropy_mean",
    "phase",
    "shots",
    "finetune_steps",
    "steps_to_threshold",
)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def entropy_rows(weights) -> np.ndarray:
    """Natural-log entropy of each weight row; zero entries contribute zero."""
    w = np.asarray(weights, dtype=float)
    out = np.zeros(w.shape[0])
    for l in range(w.shape[0]):
        pos = w[l][w[l] > 0]
        out[l] = float(-(pos * np.log(pos)).sum())
    return out


def metric_sr(outcomes) -> float:
    """Fraction of successful episodes."""
    if not outcomes:
        raise ValueError("no episodes to score")
    return sum(1.0 for o in outcomes if o.success) / len(outcomes)


def metric_ps(outcomes, max_steps: int) -> float:
    """Mean steps to success; failures count the full budget."""
    if not outcomes:
        raise ValueError("no episodes to score")
    return sum((o.steps if o.success else max_steps) for o in outcomes) / len(outcomes)


def steps_to_threshold(history, theta: float, window: int = 9) -> int:
    """First step whose trailing windowed mean loss is <= theta; -1 if never."""
    if not history:
        return -1
    acc = []
    for i in range(len(history)):
        lo = max(0, i - window + 1)
        acc.append(sum(history[lo : i + 1]) / (i + 1 - lo))
        if acc[-1] <= theta:
            return i
    return -1


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    episodes: int = 20
    k: int = 3
    temperature: float = 1.0
    max_steps: int = gw.MAX_STEPS_DEFAULT


@dataclass
class EpisodeOutcome:
    success: bool
    steps: int
    weights: list  # per-step (L, N) blend weights actually applied
    entropies: list  # per-step (L,) routing entropies
    prototypes: rt.PrototypeSet  # set in effect after the episode


def _mode_weights(weights: np.ndarray, mode: str, mp_layers) -> np.ndarray:
    if mode == "per_layer":
        return weights
    if mode == "first_mp":
        return np.tile(weights[mp_layers[0]], (weights.shape[0], 1))
    if mode == "final":
        return np.tile(weights[-1], (weights.shape[0], 1))
    raise ValueError(f"weight mode must be one of {WEIGHT_MODES}, got {mode!r}")


def run_episode(
    mixture: wm.Mixture,
    processor,
    prototypes,
    domain: gw.DomainSpec,
    episode: gw.Episode,
    cfg: EvalConfig,
    refine: ad.RefinementConfig = None,
    weight_mode: str = "per_layer",
    base_only: bool = False,
) -> EpisodeOutcome:
    """Greedy rollout with per-step routing and optional prototype refinement.

    A goal that already holds in the initial state succeeds in zero steps.
    """
    state = episode.init
    protos = prototypes
    weights_log = []
    entropy_log = []
    if gw.success(domain, state, episode.goal):
        return EpisodeOutcome(True, 0, weights_log, entropy_log, protos)
    for t in range(cfg.max_steps):
        triples = state.to_triples(domain)
        if base_only:
            weights = mixture.zero_weights()
            emb = None
        else:
            graph = gw.graph_from_triples(domain, triples)
            emb = rt.pooled_embeddings(processor, graph, episode.instruction)
            decision = rt.route(emb, protos, cfg.k, cfg.temperature)
            weights = _mode_weights(decision.weights, weight_mode, processor.mp_layers)
            weights_log.append(weights)
            entropy_log.append(entropy_rows(weights))
        action = wm.predict_action(mixture, weights, episode.instruction, triples, allowed_args=domain.labels)
        state = gw.step(domain, state, action).state
        if refine is not None and not base_only:
            protos = ad.refine_prototypes(protos, emb, refine)
        if gw.success(domain, state, episode.goal):
            return EpisodeOutcome(True, t + 1, weights_log, entropy_log, protos)
    return EpisodeOutcome(False, cfg.max_steps, weights_log, entropy_log, protos)


def evaluate_domain(
    mixture,
    processor,
    prototypes,
    domain: gw.DomainSpec,
    cfg: EvalConfig,
    seed: int,
    refine: ad.RefinementConfig = None,
    weight_mode: str = "per_layer",
    base_only: bool = False,
) -> dict:
    """Aggregate one domain's episodes for one seed.

    With refinement persistence "persist" the refined set carries across
    the domain's episodes; "episode" starts each episode from the given set.
    """
    outcomes = []
    protos = prototypes
    weight_sum = None
    weight_count = 0
    entropy_sum = None
    for e_idx in range(cfg.episodes):
        rng = gw.episode_rng(seed, gw._stable_id(domain.domain_id), e_idx)
        episode = gw.sample_episode(domain, rng)
        out = run_episode(mixture, processor, protos, domain, episode, cfg, refine, weight_mode, base_only)
        outcomes.append(out)
        if refine is not None and refine.persistence == "persist":
            protos = out.prototypes
        for w in out.weights:
            weight_sum = w.copy() if weight_sum is None else weight_sum + w
            weight_count += 1
        for e in out.entropies:
            entropy_sum = e.copy() if entropy_sum is None else entropy_sum + e
    entropy = None if entropy_sum is None else entropy_sum / weight_count
    return {
        "sr": metric_sr(outcomes),
        "ps": metric_ps(outcomes, cfg.max_steps),
        "episodes": len(outcomes),
        "entropy": entropy,
        "weight_sum": weight_sum,
        "weight_count": weight_count,
    }


def _row(scenario, variant, split, domain_id, seed, cfg, res, phase="", shots="", finetune_steps="", sts=""):
    ent = res["entropy"]
    return {
        "scenario": scenario,
        "variant": variant,
        "split": split,
        "domain_id": domain_id,
        "seed": seed,
        "k": cfg.k,
        "episodes": res["episodes"],
        "sr": res["sr"],
        "ps": res["ps"],
        "entropy_first": "" if ent is None else float(ent[0]),
        "entropy_final": "" if ent is None else float(ent[-1]),
        "entropy_mean": "" if ent is None else float(np.mean(ent)),
        "phase": phase,
        "shots": shots,
        "finetune_steps": finetune_steps,
        "steps_to_threshold": sts,
    }


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


def scenario_zero_shot(mixture, processor, prototypes, seen, unseen, cfg: EvalConfig, refine: ad.RefinementConfig):
    """Mixture vs frozen base, with and without refinement, on both splits.

    Returns (rows, heat) where heat is the (L, N) mean applied weight matrix
    over seen-split mixture episodes.
    """
    rows = []
    heat_sum = None
    heat_count = 0
    for split, domains in (("seen", seen), ("unseen", unseen)):
        for domain in domains:
            for seed in cfg.seeds:
                for variant, rf, base_only in (
                    ("mixture", None, False),
                    ("mixture_refine", refine, False),
                    ("base", None, True),
                ):
                    res = evaluate_domain(mixture, processor, prototypes, domain, cfg, seed, rf, "per_layer", base_only)
                    rows.append(_row("zero_shot", variant, split, domain.domain_id, seed, cfg, res))
                    if variant == "mixture" and split == "seen" and res["weight_count"]:
                        heat_sum = res["weight_sum"] if heat_sum is None else heat_sum + res["weight_sum"]
                        heat_count += res["weight_count"]
    heat = None if heat_sum is None else heat_sum / heat_count
    return rows, heat


def _fewshot_demos(domain: gw.DomainSpec, shots: int, seed: int):
    demos = []
    for j in range(shots):
        rng = gw.episode_rng(seed, gw._stable_id(domain.domain_id) ^ 0x5A5A5A, j)
        demos.append(gw.demonstrate(domain, gw.sample_episode(domain, rng)))
    return demos


def scenario_few_shot(mixture, processor, prototypes, unseen, shots: int, cfg: EvalConfig, aug: ad.AugmentConfig):
    """Independent per-domain augmentation: distilled init vs scratch init.

    The scratch run's trailing-window final loss defines the threshold both
    inits race to; evaluation runs without refinement to isolate the
    augmentation quality.
    """
    rows = []
    reports = []
    for domain in unseen:
        demos = _fewshot_demos(domain, shots, aug.seed)
        per_variant = {}
        for variant in ("distill", "scratch"):
            vcfg = ad.AugmentConfig(
                k=aug.k,
                temperature=aug.temperature,
                finetune_steps=aug.finetune_steps,
                lr=aug.lr,
                batch_size=aug.batch_size,
                warmup=aug.warmup,
                min_lr=aug.min_lr,
                seed=aug.seed,
                init=variant,
            )
            per_variant[variant] = ad.augment_model(mixture, processor, prototypes, domain, demos, vcfg)
        theta_hist = per_variant["scratch"][2]["history"]
        theta = float(np.mean(theta_hist[-9:])) if theta_hist else 0.0
        for variant in ("distill", "scratch"):
            new_mix, new_protos, report = per_variant[variant]
            sts = steps_to_threshold(report["history"], theta)
            report["steps_to_threshold"] = sts
            report["threshold"] = theta
            reports.append(report)
            for seed in cfg.seeds:
                res = evaluate_domain(new_mix, processor, new_protos, domain, cfg, seed)
                rows.append(
                    _row(
                        "few_shot",
                        f"fewshot_{variant}",
                        "unseen",
                        domain.domain_id,
                        seed,
                        cfg,
                        res,
                        shots=shots,
                        finetune_steps=aug.finetune_steps,
                        sts=sts,
                    )
                )
    return rows, reports


def scenario_continuous(mixture, processor, prototypes, unseen, shots: int, cfg: EvalConfig, aug: ad.AugmentConfig, seen=()):
    """Phased accumulation: augment one domain per phase, re-evaluating all
    domains added so far; optionally re-check the seen split at the end."""
    rows = []
    mix, protos = mixture, prototypes
    added = []
    for phase, domain in enumerate(unseen, start=1):
        demos = _fewshot_demos(domain, shots, aug.seed)
        mix, protos, _report = ad.augment_model(mix, processor, protos, domain, demos, aug)
        added.append(domain)
        for d in added:
            for seed in cfg.seeds:
                res = evaluate_domain(mix, processor, protos, d, cfg, seed)
                rows.append(
                    _row("continuous", "accumulated", "unseen", d.domain_id, seed, cfg, res, phase=phase, shots=shots)
                )
    for d in seen:
        for seed in cfg.seeds:
            res = evaluate_domain(mix, processor, protos, d, cfg, seed)
            rows.append(
                _row("continuous", "seen_after", "seen", d.domain_id, seed, cfg, res, phase=len(added), shots=shots)
            )
    return rows, mix, protos


def run_ablations(mixture, processor, prototypes, seen, unseen, cfg: EvalConfig, refine: ad.RefinementConfig, ks=(1, 3, 5, None)):
    """Granularity ablations on the seen split; K sweep on the unseen split."""
    rows = []
    for variant, mode in (("object_level", "first_mp"), ("scene_level", "final"), ("full", "per_layer")):
        for domain in seen:
            for seed in cfg.seeds:
                res = evaluate_domain(mixture, processor, prototypes, domain, cfg, seed, None, mode)
                rows.append(_row("ablation", variant, "seen", domain.domain_id, seed, cfg, res))
    n = prototypes.n_experts
    for k in ks:
        k_eff = n if k is None else k
        kcfg = EvalConfig(cfg.seeds, cfg.episodes, k_eff, cfg.temperature, cfg.max_steps)
        variant = f"k_{'all' if k is None else k}"
        for domain in unseen:
            for seed in cfg.seeds:
                res = evaluate_domain(mixture, processor, prototypes, domain, kcfg, seed, refine)
                rows.append(_row("ablation", variant, "unseen", domain.domain_id, seed, kcfg, res))
    return rows


def routing_identifiability(processor, prototypes, domains, seed: int, episodes: int) -> float:
    """Fraction of expert-demonstration steps whose final-layer best cosine
    picks the observation's own domain."""
    hits = 0
    total = 0
    for domain in domains:
        j_true = prototypes.domain_ids.index(domain.domain_id)
        for e_idx in range(episodes):
            rng = gw.episode_rng(seed, gw._stable_id(domain.domain_id) ^ 0x3C3C3C, e_idx)
            demo = gw.demonstrate(domain, gw.sample_episode(domain, rng))
            for obs, _act, _nxt in demo.steps:
                graph = gw.graph_from_triples(domain, obs)
                emb = rt.pooled_embeddings(processor, graph, demo.instruction)
                decision = rt.route(emb, prototypes, 1, 1.0)
                if int(np.argmax(decision.raw[-1])) == j_true:
                    hits += 1
                total += 1
    if total == 0:
        raise ValueError("no demonstration steps to score")
    return hits / total


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(rows, path: str):
    """Fixed column order, rows sorted by their string form; repr floats."""
    lines = [",".join(METRIC_COLUMNS)]
    rendered = sorted(",".join(_fmt(r[c]) for c in METRIC_COLUMNS) for r in rows)
    lines.extend(rendered)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_heatmap_csv(heat, domain_ids, path: str):
    """L rows by N expert columns of mean applied blend weights."""
    heat = np.asarray(heat)
    lines = [",".join(["layer"] + list(domain_ids))]
    for l in range(heat.shape[0]):
        lines.append(",".join([str(l)] + [repr(float(x)) for x in heat[l]]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_config_json(config: dict, path: str):
    with open(path, "w") as fh:
        fh.write(json.dumps(config, sort_keys=True, indent=2) + "\n")


def write_summary_txt(rows, path: str):
    """Mean SR/PS per (scenario, variant, split), deterministically ordered."""
    groups = {}
    for r in rows:
        key = (r["scenario"], r["variant"], r["split"])
        groups.setdefault(key, []).append(r)
    lines = []
    for key in sorted(groups):
        rs = groups[key]
        sr = sum(r["sr"] for r in rs) / len(rs)
        ps = sum(r["ps"] for r in rs) / len(rs)
        lines.append(f"{key[0]}/{key[1]}/{key[2]}: sr={sr:.4f} ps={ps:.4f} rows={len(rs)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def emit_report(rows, heat, domain_ids, config: dict, outdir: str):
    """metrics.csv + heatmap.csv + config.json + summary.txt, byte-stable."""
    os.makedirs(outdir, exist_ok=True)
    write_metrics_csv(rows, os.path.join(outdir, "metrics.csv"))
    if heat is not None:
        write_heatmap_csv(heat, domain_ids, os.path.join(outdir, "heatmap.csv"))
    write_config_json(config, os.path.join(outdir, "config.json"))
    write_summary_txt(rows, os.path.join(outdir, "summary.txt"))
