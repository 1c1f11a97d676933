"""Flat dotted-key configuration shared by the CLI commands.

A config file holds ``key = value`` lines (``#`` comments allowed); command
line overrides win over the file, which wins over the defaults below.
Unknown keys are rejected. Every run writes back its fully resolved
configuration so (snapshot, seed) reproduces the run.

Desk-scale defaults are deliberately small. The full-scale values from the
original experimental setting are kept in ``REFERENCE_SCALE`` for
documentation; they are far outside what this package is meant to train.
"""

from __future__ import annotations

from pathlib import Path

from .corpus import GeneratorConfig
from .errors import ConfigError
from .experience import ExperienceConfig
from .language_map import LanguageMapConfig
from .pipeline import ModelConfig, PipelineConfig
from .scene_encoder import SceneEncoderConfig

DEFAULTS = {
    "seed": 0,
    # corpus
    "corpus.objects": 20,
    "corpus.predicates": 15,
    "corpus.scenes": 100,
    "corpus.entities_min": 3,
    "corpus.entities_max": 6,
    "corpus.zipf": 1.2,
    "corpus.lambda_lang": 0.9,
    "corpus.sigma": 0.05,
    "corpus.node_dim": 16,
    "corpus.edge_size": 4,
    "corpus.edge_density": 0.4,
    "corpus.zero_shot": 10,
    "corpus.split_train": 0.7,
    "corpus.split_val": 0.1,
    # experience estimation
    "eem.embed_dim": 16,
    "eem.proj_dim": 64,
    "eem.hidden_dim": 256,
    # language map (channels must match the dataset's edge channels)
    "lmm.channels": 8,
    "lmm.pool_size": 4,
    "lmm.share_embeddings": True,
    # scene encoder
    "sem.layers": 2,
    "sem.heads": 4,
    "sem.dim": 32,
    "sem.out_dim": 32,
    "sem.embed_dim": 16,
    "sem.pos_dim": 8,
    "sem.ffn_dim": 64,
    "sem.attention_residual": False,
    # baseline predictor
    "baseline.hidden_dim": 64,
    # pipeline toggles and fusion
    "pipeline.use_eem": True,
    "pipeline.use_lmm": True,
    "pipeline.use_sem": True,
    "pipeline.use_freq_baseline": False,
    "pipeline.lambda_est": 1.0,
    "pipeline.eem_stop_gradient": False,
    "pipeline.freeze_embeddings": False,
    # training
    "train.lr": 0.2,
    "train.epochs": 10,
    "train.batch_size": 8,
    # evaluation / ablation
    "eval.ks": "1,5,10,20,50,100",
    "ablate.grid": "baseline,eem,eem+lmm,eem+lmm+sem",
    "ablate.seeds": "0,1,2",
}

# full-scale values used by the original experimental setting, for reference
REFERENCE_SCALE = {
    "corpus.objects": 150,
    "corpus.predicates": 50,
    "corpus.edge_size": 7,
    "eem.embed_dim": 200,
    "eem.proj_dim": 1024,
    "eem.hidden_dim": 4096,
    "lmm.channels": 256,
    "sem.layers": 4,
    "sem.heads": 8,
    "sem.out_dim": 512,
}


def _parse_value(key: str, raw, default):
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"no such config file: {p}")
    values = {}
    for no, line in enumerate(p.read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{p} line {no}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        values[key] = raw
    return values


def resolve(config_path=None, overrides=(), seed=None) -> dict:
    """Defaults ← config file ← --set overrides ← --seed, typed and checked."""
    cfg = dict(DEFAULTS)

    def apply(key, raw, origin):
        if key not in DEFAULTS:
            raise ConfigError(f"{origin}: unknown config key {key!r}")
        cfg[key] = _parse_value(key, raw, DEFAULTS[key])

    if config_path is not None:
        for key, raw in load_config_file(config_path).items():
            apply(key, raw, str(config_path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        apply(key.strip(), raw.strip(), "command line")
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    from .pipeline import toggles_from_label

    try:
        generator_config(cfg)
        pipeline_config(cfg)
        model_config(cfg)
        eval_ks(cfg)
        ablation_seeds(cfg)
        for label in ablation_grid(cfg):
            toggles_from_label(label)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def snapshot(cfg: dict) -> str:
    """Canonical resolved-config text; contains no paths or timestamps."""
    lines = [f"{key} = {cfg[key]}" for key in sorted(cfg)]
    return "\n".join(lines) + "\n"


def generator_config(cfg: dict) -> GeneratorConfig:
    return GeneratorConfig(
        n_objects=cfg["corpus.objects"],
        n_predicates=cfg["corpus.predicates"],
        n_scenes=cfg["corpus.scenes"],
        entities_min=cfg["corpus.entities_min"],
        entities_max=cfg["corpus.entities_max"],
        zipf_exponent=cfg["corpus.zipf"],
        lambda_lang=cfg["corpus.lambda_lang"],
        sigma=cfg["corpus.sigma"],
        node_dim=cfg["corpus.node_dim"],
        edge_channels=cfg["lmm.channels"],
        edge_size=cfg["corpus.edge_size"],
        edge_density=cfg["corpus.edge_density"],
        zero_shot_count=cfg["corpus.zero_shot"],
        split_train=cfg["corpus.split_train"],
        split_val=cfg["corpus.split_val"],
        seed=cfg["seed"],
    )


def model_config(cfg: dict, header: dict | None = None) -> ModelConfig:
    """Model layout; feature dims come from the dataset header when given."""
    n_objects = cfg["corpus.objects"]
    n_predicates = cfg["corpus.predicates"]
    node_dim = cfg["corpus.node_dim"]
    edge_size = cfg["corpus.edge_size"]
    edge_channels = cfg["lmm.channels"]
    if header is not None:
        n_objects = int(header["n_objects"])
        n_predicates = int(header["n_predicates"])
        node_dim = int(header["node_dim"])
        edge_size = int(header["edge_size"])
        if int(header["edge_channels"]) != edge_channels:
            raise ConfigError(
                f"lmm.channels = {edge_channels} but the dataset carries "
                f"{header['edge_channels']} edge channels"
            )
    return ModelConfig(
        n_objects=n_objects,
        n_predicates=n_predicates,
        node_dim=node_dim,
        edge_channels=edge_channels,
        edge_size=edge_size,
        eem=ExperienceConfig(
            n_objects=n_objects,
            n_predicates=n_predicates,
            embed_dim=cfg["eem.embed_dim"],
            proj_dim=cfg["eem.proj_dim"],
            hidden_dim=cfg["eem.hidden_dim"],
        ),
        lmm=LanguageMapConfig(
            channels=edge_channels,
            pool_size=cfg["lmm.pool_size"],
            embed_dim=cfg["eem.embed_dim"],
            share_embeddings=cfg["lmm.share_embeddings"],
        ),
        sem=SceneEncoderConfig(
            n_objects=n_objects,
            embed_dim=cfg["sem.embed_dim"],
            pos_dim=cfg["sem.pos_dim"],
            layers=cfg["sem.layers"],
            heads=cfg["sem.heads"],
            model_dim=cfg["sem.dim"],
            ffn_dim=cfg["sem.ffn_dim"],
            out_dim=cfg["sem.out_dim"],
            attention_residual=cfg["sem.attention_residual"],
        ),
        baseline_hidden=cfg["baseline.hidden_dim"],
    )


def pipeline_config(cfg: dict) -> PipelineConfig:
    return PipelineConfig(
        use_eem=cfg["pipeline.use_eem"],
        use_lmm=cfg["pipeline.use_lmm"],
        use_sem=cfg["pipeline.use_sem"],
        use_freq_baseline=cfg["pipeline.use_freq_baseline"],
        lambda_est=cfg["pipeline.lambda_est"],
        eem_stop_gradient=cfg["pipeline.eem_stop_gradient"],
        freeze_embeddings=cfg["pipeline.freeze_embeddings"],
        lr=cfg["train.lr"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        seed=cfg["seed"],
    )


def _int_list(text: str, what: str):
    try:
        values = tuple(int(part) for part in str(text).split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"{what}: {exc}") from None
    if not values:
        raise ConfigError(f"{what}: empty list")
    return values


def eval_ks(cfg: dict):
    ks = _int_list(cfg["eval.ks"], "eval.ks")
    if any(k < 1 for k in ks):
        raise ConfigError("eval.ks: every K must be >= 1")
    return ks


def ablation_seeds(cfg: dict):
    return _int_list(cfg["ablate.seeds"], "ablate.seeds")


def ablation_grid(cfg: dict):
    labels = tuple(part.strip() for part in cfg["ablate.grid"].split(",")
                   if part.strip())
    if not labels:
        raise ConfigError("ablate.grid: empty grid")
    return labels
