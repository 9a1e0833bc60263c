"""Command-line pipeline: data, training, evaluation, and reports."""

import argparse
import copy
import hashlib
import json
import logging
import os
import sys

import numpy as np

try:
    import tomllib
except ImportError:
    import tomli as tomllib

from . import adapt as ad
from . import graphworld as gw
from . import harness as hn
from . import router as rt
from . import worldmodel as wm

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

DEFAULTS = {
    "seed": 0,
    "model": {"n_layers": 8, "d_h": 64, "rank": 4, "max_seq_len": 160},
    "data": {"seen_domains": 12, "unseen_domains": 6, "episodes_per_domain": 20, "holdout": 2},
    "router": {
        "d_h": 32,
        "d_proj": 16,
        "steps": 3000,
        "lr": 0.3,
        "batch_size": 16,
        "tau_c": 0.1,
        "lam": 3.0,
        "warmup": 60,
        "min_lr": 0.0,
        "feature_rate": 0.25,
        "edge_rate": 0.4,
        "layers": "all",
        "depth_weight": 3.0,
    },
    "train": {
        "base_steps": 400,
        "base_lr": 0.05,
        "adapter_steps": 1200,
        "adapter_lr": 0.3,
        "batch_size": 16,
        "warmup": 50,
        "min_lr": 0.0,
        "joint_steps": 0,
        "joint_lr": 0.02,
    },
    "routing": {"k": 3, "temperature": 1.0},
    "refine": {"alpha": 0.5, "tau_r": 1.0, "persistence": "episode", "clamp": False},
    "augment": {"shots": 5, "finetune_steps": 200, "lr": 0.05, "batch_size": 16, "warmup": 0},
    "eval": {"episodes": 20, "seeds": [0, 1, 2, 3, 4], "max_steps": 20},
}


class ConfigError(Exception):
    pass


class MissingArtifact(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _merge(defaults, user, prefix=""):
    out = {}
    for key, base_val in defaults.items():
        if key in user:
            given = user[key]
            if isinstance(base_val, dict):
                if not isinstance(given, dict):
                    raise ConfigError(f"{prefix}{key} must be a table")
                out[key] = _merge(base_val, given, f"{prefix}{key}.")
            else:
                out[key] = given
        else:
            out[key] = copy.deepcopy(base_val)
    unknown = [f"{prefix}{k}" for k in user if k not in defaults]
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
    return out


def _require_number(cfg, path, low=None, high=None, integer=False):
    node = cfg
    for part in path.split("."):
        node = node[part]
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigError(f"{path} must be a number, got {node!r}")
    if integer and not isinstance(node, int):
        raise ConfigError(f"{path} must be an integer, got {node!r}")
    if low is not None and node < low:
        raise ConfigError(f"{path} must be >= {low}, got {node}")
    if high is not None and node > high:
        raise ConfigError(f"{path} must be <= {high}, got {node}")


def validate_config(cfg: dict):
    _require_number(cfg, "seed", low=0, integer=True)
    _require_number(cfg, "model.n_layers", low=1, integer=True)
    _require_number(cfg, "model.d_h", low=1, integer=True)
    _require_number(cfg, "model.rank", low=1, integer=True)
    _require_number(cfg, "model.max_seq_len", low=8, integer=True)
    _require_number(cfg, "data.seen_domains", low=1, high=12, integer=True)
    _require_number(cfg, "data.unseen_domains", low=0, high=6, integer=True)
    _require_number(cfg, "data.episodes_per_domain", low=1, integer=True)
    _require_number(cfg, "data.holdout", low=0, integer=True)
    if cfg["data"]["holdout"] >= cfg["data"]["episodes_per_domain"]:
        raise ConfigError(
            f"data.holdout must be < data.episodes_per_domain, got {cfg['data']['holdout']}"
        )
    _require_number(cfg, "router.d_h", low=1, integer=True)
    _require_number(cfg, "router.d_proj", low=1, integer=True)
    _require_number(cfg, "router.steps", low=0, integer=True)
    _require_number(cfg, "router.lr", low=0.0)
    _require_number(cfg, "router.batch_size", low=2, integer=True)
    _require_number(cfg, "router.tau_c", low=1e-9)
    _require_number(cfg, "router.lam", low=0.0)
    _require_number(cfg, "router.warmup", low=0, integer=True)
    _require_number(cfg, "router.min_lr", low=0.0)
    _require_number(cfg, "router.feature_rate", low=0.0, high=0.999)
    _require_number(cfg, "router.edge_rate", low=0.0, high=0.999)
    if cfg["router"]["layers"] not in ("final", "all"):
        raise ConfigError(
            f"router.layers must be 'final' or 'all', got {cfg['router']['layers']!r}"
        )
    _require_number(cfg, "router.depth_weight", low=0.0)
    for key in ("base_steps", "adapter_steps", "joint_steps", "warmup"):
        _require_number(cfg, f"train.{key}", low=0, integer=True)
    for key in ("base_lr", "adapter_lr", "joint_lr", "min_lr"):
        _require_number(cfg, f"train.{key}", low=0.0)
    _require_number(cfg, "train.batch_size", low=1, integer=True)
    _require_number(cfg, "routing.k", low=1, integer=True)
    _require_number(cfg, "routing.temperature", low=1e-9)
    _require_number(cfg, "refine.alpha", low=0.0, high=1.0)
    _require_number(cfg, "refine.tau_r", low=1e-9)
    if cfg["refine"]["persistence"] not in ad.PERSISTENCE_MODES:
        raise ConfigError(
            f"refine.persistence must be one of {ad.PERSISTENCE_MODES}, got {cfg['refine']['persistence']!r}"
        )
    if not isinstance(cfg["refine"]["clamp"], bool):
        raise ConfigError(f"refine.clamp must be a boolean, got {cfg['refine']['clamp']!r}")
    if cfg["augment"]["shots"] not in (1, 5):
        raise ConfigError(f"augment.shots must be 1 or 5, got {cfg['augment']['shots']!r}")
    _require_number(cfg, "augment.finetune_steps", low=0, integer=True)
    _require_number(cfg, "augment.lr", low=0.0)
    _require_number(cfg, "augment.batch_size", low=1, integer=True)
    _require_number(cfg, "augment.warmup", low=0, integer=True)
    _require_number(cfg, "eval.episodes", low=1, integer=True)
    _require_number(cfg, "eval.max_steps", low=1, integer=True)
    seeds = cfg["eval"]["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError(f"eval.seeds must be a non-empty list of integers, got {seeds!r}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"eval.seeds must be distinct, got {seeds!r}")


def load_config(path: str) -> dict:
    """Parse TOML, reject unknown keys, fill defaults, validate bounds."""
    if not os.path.exists(path):
        raise MissingArtifact(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            user = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    cfg = _merge(DEFAULTS, user)
    validate_config(cfg)
    return cfg


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot encode config value {v!r}")


def emit_toml(cfg: dict) -> str:
    """Write the filled config back out; loading it again is an identity."""
    lines = []
    for key in cfg:
        if not isinstance(cfg[key], dict):
            lines.append(f"{key} = {_toml_value(cfg[key])}")
    for key in cfg:
        if isinstance(cfg[key], dict):
            lines.append("")
            lines.append(f"[{key}]")
            for k2, v2 in cfg[key].items():
                lines.append(f"{k2} = {_toml_value(v2)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


def run_dir(cfg: dict) -> str:
    base = os.environ.get("TMOW_RUN_DIR", "runs")
    return os.path.join(base, f"{config_hash(cfg)}-s{cfg['seed']}")


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _require_files(*paths):
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise MissingArtifact("missing artifacts: " + ", ".join(missing))


def _refuse_overwrite(path: str, force: bool):
    if os.path.exists(path) and not force:
        raise MissingArtifact(f"refusing to overwrite {path} (pass --force)")


def _derived_seed(seed: int, label: str) -> int:
    return int(np.random.SeedSequence([seed, gw._stable_id(label)]).generate_state(1)[0] % 2**31)


def _paths(cfg: dict) -> dict:
    d = run_dir(cfg)
    return {
        "dir": d,
        "config": os.path.join(d, "config.echo.toml"),
        "demos": os.path.join(d, "demos.jsonl"),
        "base": os.path.join(d, "base.json"),
        "mixture": os.path.join(d, "mixture.json"),
        "joint": os.path.join(d, "joint_mixture.json"),
        "router": os.path.join(d, "router.json"),
        "prototypes": os.path.join(d, "prototypes.json"),
    }


def _seen_domains(cfg):
    return gw.seen_domain_specs(cfg["seed"], cfg["data"]["seen_domains"])


def _unseen_domains(cfg):
    return gw.unseen_domain_specs(cfg["seed"], cfg["data"]["unseen_domains"])


def _demos_by_domain(cfg, demos):
    domains = {d.domain_id: d for d in _seen_domains(cfg)}
    train, _held = gw.train_split(demos, cfg["data"]["holdout"])
    grouped = {}
    for demo in train:
        if demo.domain_id not in domains:
            raise ValueError(f"demonstration for unknown domain {demo.domain_id}")
        grouped.setdefault(demo.domain_id, []).append(demo)
    return {did: (domains[did], grouped[did]) for did in sorted(grouped)}


def _load_eval_mixture(cfg, paths):
    vocab = gw.Vocab()
    source = paths["joint"] if os.path.exists(paths["joint"]) else paths["mixture"]
    _require_files(source, paths["router"], paths["prototypes"])
    mixture = wm.load_mixture(source, vocab)
    processor = rt.load_processor(paths["router"], vocab)
    protos = rt.load_prototypes(paths["prototypes"])
    return mixture, processor, protos


def _eval_config(cfg) -> hn.EvalConfig:
    return hn.EvalConfig(
        seeds=tuple(cfg["eval"]["seeds"]),
        episodes=cfg["eval"]["episodes"],
        k=cfg["routing"]["k"],
        temperature=cfg["routing"]["temperature"],
        max_steps=cfg["eval"]["max_steps"],
    )


def _refine_config(cfg) -> ad.RefinementConfig:
    r = cfg["refine"]
    return ad.RefinementConfig(alpha=r["alpha"], tau_r=r["tau_r"], persistence=r["persistence"], clamp=r["clamp"])


def _augment_config(cfg, shots=None, init="distill") -> ad.AugmentConfig:
    a = cfg["augment"]
    return ad.AugmentConfig(
        k=cfg["routing"]["k"],
        temperature=cfg["routing"]["temperature"],
        finetune_steps=a["finetune_steps"],
        lr=a["lr"],
        batch_size=a["batch_size"],
        warmup=a["warmup"],
        seed=cfg["seed"],
        init=init,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.seen_domains is not None:
        cfg["data"]["seen_domains"] = args.seen_domains
    if args.unseen_domains is not None:
        cfg["data"]["unseen_domains"] = args.unseen_domains
    if args.episodes_per_domain is not None:
        cfg["data"]["episodes_per_domain"] = args.episodes_per_domain
    validate_config(cfg)
    paths = _paths(cfg)
    out = args.out or paths["demos"]
    _refuse_overwrite(out, args.force)
    os.makedirs(paths["dir"], exist_ok=True)
    demos = gw.gen_demos(_seen_domains(cfg), cfg["seed"], cfg["data"]["episodes_per_domain"])
    gw.write_demos(out, demos)
    with open(paths["config"], "w") as fh:
        fh.write(emit_toml(cfg))
    print(f"wrote {len(demos)} demonstrations to {out}")
    print(f"run directory: {paths['dir']}")
    return EXIT_OK


def cmd_train_base(args) -> int:
    cfg = load_config(args.config)
    paths = _paths(cfg)
    _require_files(paths["demos"])
    _refuse_overwrite(paths["base"], args.force)
    vocab = gw.Vocab()
    demos = gw.read_demos(paths["demos"])
    train, _ = gw.train_split(demos, cfg["data"]["holdout"])
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 7001]))
    base = wm.BaseModel(vocab, cfg["model"]["n_layers"], cfg["model"]["d_h"], cfg["model"]["max_seq_len"], rng)
    tcfg = wm.TrainConfig(
        steps=cfg["train"]["base_steps"],
        lr=cfg["train"]["base_lr"],
        batch_size=cfg["train"]["batch_size"],
        warmup=cfg["train"]["warmup"],
        min_lr=cfg["train"]["min_lr"],
        seed=_derived_seed(cfg["seed"], "base"),
    )
    history = wm.train_base(base, train, tcfg)
    wm.save_base(paths["base"], base)
    first = history[0] if history else float("nan")
    last = history[-1] if history else float("nan")
    print(f"base: {len(history)} steps, loss {first:.4f} -> {last:.4f}")
    print(f"saved {paths['base']}")
    return EXIT_OK


def cmd_train_adapters(args) -> int:
    cfg = load_config(args.config)
    paths = _paths(cfg)
    _require_files(paths["demos"], paths["base"])
    _refuse_overwrite(paths["mixture"], args.force)
    vocab = gw.Vocab()
    base = wm.load_base(paths["base"], vocab)
    grouped = _demos_by_domain(cfg, gw.read_demos(paths["demos"]))
    adapters = []
    domain_ids = []
    for domain_id in sorted(grouped):
        _domain, demos = grouped[domain_id]
        tcfg = wm.TrainConfig(
            steps=cfg["train"]["adapter_steps"],
            lr=cfg["train"]["adapter_lr"],
            batch_size=cfg["train"]["batch_size"],
            warmup=cfg["train"]["warmup"],
            min_lr=cfg["train"]["min_lr"],
            seed=_derived_seed(cfg["seed"], domain_id),
        )
        adapter, history = wm.train_adapter(base, demos, cfg["model"]["rank"], tcfg)
        adapters.append(adapter)
        domain_ids.append(domain_id)
        last = history[-1] if history else float("nan")
        print(f"adapter {domain_id}: final loss {last:.4f}")
    mixture = wm.Mixture(base, adapters, domain_ids)
    wm.save_mixture(paths["mixture"], mixture)
    print(f"saved {paths['mixture']} ({len(adapters)} experts)")
    return EXIT_OK


def cmd_pretrain_router(args) -> int:
    cfg = load_config(args.config)
    paths = _paths(cfg)
    _require_files(paths["demos"])
    _refuse_overwrite(paths["router"], args.force)
    vocab = gw.Vocab()
    grouped = _demos_by_domain(cfg, gw.read_demos(paths["demos"]))
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 7013]))
    processor = rt.GraphProcessor(
        vocab, cfg["model"]["n_layers"], gw.FEATURE_DIM, cfg["router"]["d_h"], cfg["router"]["d_proj"], rng
    )
    pool = rt.demo_pool(grouped)
    r = cfg["router"]
    ccfg = rt.ContrastiveConfig(
        steps=r["steps"],
        lr=r["lr"],
        batch_size=r["batch_size"],
        tau_c=r["tau_c"],
        lam=r["lam"],
        warmup=r["warmup"],
        min_lr=r["min_lr"],
        seed=_derived_seed(cfg["seed"], "router"),
        feature_rate=r["feature_rate"],
        edge_rate=r["edge_rate"],
        layers=r["layers"],
        depth_weight=r["depth_weight"],
    )
    history = rt.contrastive_pretrain(processor, pool, ccfg)
    rt.save_processor(paths["router"], processor)
    first = history[0] if history else float("nan")
    last = history[-1] if history else float("nan")
    print(f"router: {len(history)} steps, loss {first:.4f} -> {last:.4f}")
    print(f"saved {paths['router']}")
    return EXIT_OK


def cmd_extract_prototypes(args) -> int:
    cfg = load_config(args.config)
    paths = _paths(cfg)
    _require_files(paths["demos"], paths["router"])
    _refuse_overwrite(paths["prototypes"], args.force)
    vocab = gw.Vocab()
    processor = rt.load_processor(paths["router"], vocab)
    grouped = _demos_by_domain(cfg, gw.read_demos(paths["demos"]))
    protos = rt.extract_prototypes(processor, grouped)
    rt.save_prototypes(paths["prototypes"], protos)
    print(f"saved {paths['prototypes']} ({protos.n_experts} experts x {protos.n_layers} layers)")
    return EXIT_OK


def cmd_joint_train(args) -> int:
    cfg = load_config(args.config)
    paths = _paths(cfg)
    _require_files(paths["demos"], paths["mixture"], paths["router"], paths["prototypes"])
    _refuse_overwrite(paths["joint"], args.force)
    vocab = gw.Vocab()
    mixture = wm.load_mixture(paths["mixture"], vocab)
    processor = rt.load_processor(paths["router"], vocab)
    protos = rt.load_prototypes(paths["prototypes"])
    grouped = _demos_by_domain(cfg, gw.read_demos(paths["demos"]))
    domains = {did: spec for did, (spec, _demos) in grouped.items()}
    train = [demo for _did, (_spec, demos) in sorted(grouped.items()) for demo in demos]
    k = cfg["routing"]["k"]
    temperature = cfg["routing"]["temperature"]

    def route_weights_fn(demo, step_index):
        domain = domains[demo.domain_id]
        graph = gw.graph_from_triples(domain, demo.steps[step_index][0])
        emb = rt.pooled_embeddings(processor, graph, demo.instruction)
        return rt.route(emb, protos, k, temperature).weights

    tcfg = wm.TrainConfig(
        steps=cfg["train"]["joint_steps"],
        lr=cfg["train"]["joint_lr"],
        batch_size=cfg["train"]["batch_size"],
        warmup=cfg["train"]["warmup"],
        min_lr=cfg["train"]["min_lr"],
        seed=_derived_seed(cfg["seed"], "joint"),
    )
    history = wm.joint_train_mixture(mixture, route_weights_fn, train, tcfg)
    wm.save_mixture(paths["joint"], mixture)
    first = history[0] if history else float("nan")
    last = history[-1] if history else float("nan")
    print(f"joint: {len(history)} steps, loss {first:.4f} -> {last:.4f}")
    print(f"saved {paths['joint']}")
    return EXIT_OK


def cmd_eval_zero_shot(args) -> int:
    cfg = load_config(args.config)
    paths = _paths(cfg)
    mixture, processor, protos = _load_eval_mixture(cfg, paths)
    rows, heat = hn.scenario_zero_shot(
        mixture, processor, protos, _seen_domains(cfg), _unseen_domains(cfg), _eval_config(cfg), _refine_config(cfg)
    )
    outdir = os.path.join(paths["dir"], "zero_shot")
    hn.emit_report(rows, heat, protos.domain_ids, cfg, outdir)
    print(f"zero-shot report in {outdir}")
    return EXIT_OK


def cmd_eval_few_shot(args) -> int:
    cfg = load_config(args.config)
    if args.shots is not None:
        cfg["augment"]["shots"] = args.shots
    validate_config(cfg)
    paths = _paths(cfg)
    mixture, processor, protos = _load_eval_mixture(cfg, paths)
    shots = cfg["augment"]["shots"]
    rows, reports = hn.scenario_few_shot(
        mixture, processor, protos, _unseen_domains(cfg), shots, _eval_config(cfg), _augment_config(cfg)
    )
    outdir = os.path.join(paths["dir"], f"few_shot_{shots}")
    hn.emit_report(rows, None, protos.domain_ids, cfg, outdir)
    with open(os.path.join(outdir, "augment_reports.json"), "w") as fh:
        fh.write(json.dumps(reports, sort_keys=True, indent=2) + "\n")
    print(f"few-shot({shots}) report in {outdir}")
    return EXIT_OK


def cmd_eval_continuous(args) -> int:
    cfg = load_config(args.config)
    paths = _paths(cfg)
    mixture, processor, protos = _load_eval_mixture(cfg, paths)
    rows, _mix, _protos = hn.scenario_continuous(
        mixture,
        processor,
        protos,
        _unseen_domains(cfg),
        cfg["augment"]["shots"],
        _eval_config(cfg),
        _augment_config(cfg),
        seen=_seen_domains(cfg),
    )
    outdir = os.path.join(paths["dir"], "continuous")
    hn.emit_report(rows, None, protos.domain_ids, cfg, outdir)
    print(f"continuous report in {outdir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    paths = _paths(cfg)
    mixture, processor, protos = _load_eval_mixture(cfg, paths)
    rows = hn.run_ablations(
        mixture, processor, protos, _seen_domains(cfg), _unseen_domains(cfg), _eval_config(cfg), _refine_config(cfg)
    )
    outdir = os.path.join(paths["dir"], "ablations")
    hn.emit_report(rows, None, protos.domain_ids, cfg, outdir)
    print(f"ablation report in {outdir}")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = load_config(args.config)
    if args.shots is not None:
        cfg["augment"]["shots"] = args.shots
    validate_config(cfg)
    _require_files(args.mixture, args.router, args.fewshot)
    protos_path = args.prototypes or os.path.join(os.path.dirname(args.router), "prototypes.json")
    _require_files(protos_path)
    os.makedirs(args.out, exist_ok=True)
    out_mixture = os.path.join(args.out, "augmented_mixture.json")
    out_protos = os.path.join(args.out, "augmented_prototypes.json")
    out_report = os.path.join(args.out, "augment_report.json")
    for p in (out_mixture, out_protos, out_report):
        _refuse_overwrite(p, args.force)
    vocab = gw.Vocab()
    mixture = wm.load_mixture(args.mixture, vocab)
    processor = rt.load_processor(args.router, vocab)
    protos = rt.load_prototypes(protos_path)
    demos = gw.read_demos(args.fewshot)
    shots = cfg["augment"]["shots"]
    domain_ids = sorted({d.domain_id for d in demos})
    if len(domain_ids) != 1:
        raise ValueError(f"--fewshot must hold one domain's demonstrations, got {domain_ids}")
    scene, _, task = domain_ids[0].rpartition("-")
    domain = gw.generate_domain(cfg["seed"], scene, task)
    mix2, protos2, report = ad.augment_model(mixture, processor, protos, domain, demos[:shots], _augment_config(cfg))
    wm.save_mixture(out_mixture, mix2)
    rt.save_prototypes(out_protos, protos2)
    with open(out_report, "w") as fh:
        fh.write(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"augmented with {domain.domain_id} ({min(shots, len(demos))} shots); report in {out_report}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = load_config(args.config)
    paths = _paths(cfg)
    names = ["zero_shot", "few_shot_1", "few_shot_5", "continuous", "ablations"]
    found = []
    lines = [f"run: {paths['dir']}", f"config hash: {config_hash(cfg)}", ""]
    for name in names:
        summary = os.path.join(paths["dir"], name, "summary.txt")
        if os.path.exists(summary):
            found.append(name)
            with open(summary) as fh:
                lines.append(f"[{name}]")
                lines.append(fh.read().rstrip())
                lines.append("")
    if not found:
        raise MissingArtifact(f"no scenario reports under {paths['dir']}; run the eval commands first")
    out = os.path.join(paths["dir"], "report.txt")
    with open(out, "w") as fh:
        fh.write("\n".join(lines).rstrip() + "\n")
    print(f"combined report in {out} ({', '.join(found)})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="worldmix", description="Mixture-of-world-models pipeline")
    parser.add_argument("--config", default="run.toml", help="path to the TOML run configuration")
    parser.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate expert demonstrations")
    p.add_argument("--seed", type=int)
    p.add_argument("--seen-domains", type=int)
    p.add_argument("--unseen-domains", type=int)
    p.add_argument("--episodes-per-domain", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    for name, fn in (
        ("train-base", cmd_train_base),
        ("train-adapters", cmd_train_adapters),
        ("pretrain-router", cmd_pretrain_router),
        ("extract-prototypes", cmd_extract_prototypes),
        ("joint-train", cmd_joint_train),
        ("eval-zero-shot", cmd_eval_zero_shot),
        ("eval-continuous", cmd_eval_continuous),
        ("ablate", cmd_ablate),
        ("report", cmd_report),
    ):
        p = sub.add_parser(name)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval-few-shot", help="augment each unseen domain independently")
    p.add_argument("--shots", type=int, choices=(1, 5))
    p.set_defaults(func=cmd_eval_few_shot)

    p = sub.add_parser("augment", help="grow a saved mixture by one domain")
    p.add_argument("--mixture", required=True)
    p.add_argument("--router", required=True)
    p.add_argument("--fewshot", required=True, help="demonstrations (one domain) for the new expert")
    p.add_argument("--prototypes")
    p.add_argument("--shots", type=int, choices=(1, 5))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError, ValueError, gw.SerializationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
