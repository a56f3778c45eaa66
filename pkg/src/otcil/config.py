"""Run configuration: dataclasses, key=value files, flag overrides.

Config files are plain text, one `key = value` per line, '#' comments.
Every field of RunConfig (trainer fields included, flattened) is a valid
key; unknown keys are an error so typos fail loudly.  The fully resolved
config is serialized into every output directory for reproducibility.
"""

import dataclasses
from dataclasses import dataclass, field


@dataclass
class TrainerConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.05
    local_weight: float = 0.2       # weight of the local head in loss and fusion
    temperature: float = 0.01       # global cosine logit temperature
    top_k: int = 8                  # patches kept per (image, class)
    attr_sample_size: int = 5       # attribute rows sampled per class
    sinkhorn_reg: float = 0.1       # entropic weight of the transport solve
    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iter: int = 100
    cov_shrinkage: float = 1e-4     # replay covariance regularizer scale
    diagonal_cov: bool = False
    replay_enabled: bool = True
    resample_attrs_each_epoch: bool = False
    seed: int = 1993


@dataclass
class RunConfig:
    bundle: str = ""
    out: str = ""
    base_size: int = 0              # classes in session 1 (0: use increment)
    increment: int = 1              # classes per later session
    mode: str = "full"
    eval_betas: list = field(default_factory=list)  # empty: use local_weight
    n_diverse: int = 3
    debug_dump: bool = False
    sessions_limit: int = 0         # stop after this many sessions (0: all)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)


MODES = ("full", "zero_shot", "global_only", "no_ot", "random_select",
         "prompt_select", "naive_match")


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {name}: expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is list:
        if not raw:
            return []
        return [float(tok) for tok in raw.replace(",", " ").split()]
    return raw


def _field_map():
    run_fields = {f.name: f.type for f in dataclasses.fields(RunConfig) if f.name != "trainer"}
    trainer_fields = {f.name: f.type for f in dataclasses.fields(TrainerConfig)}
    return run_fields, trainer_fields


_TYPES = {"int": int, "float": float, "bool": bool, "str": str, "list": list}


def _kind(annotation):
    if isinstance(annotation, str):
        return _TYPES.get(annotation, str)
    return annotation


def apply_setting(cfg: RunConfig, key: str, value: str) -> None:
    run_fields, trainer_fields = _field_map()
    if key in run_fields:
        setattr(cfg, key, _coerce(key, _kind(run_fields[key]), value))
    elif key in trainer_fields:
        setattr(cfg.trainer, key, _coerce(key, _kind(trainer_fields[key]), value))
    else:
        raise ValueError(f"unknown config key {key!r}")


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
            key, value = stripped.split("=", 1)
            apply_setting(cfg, key.strip(), value)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    t = cfg.trainer
    checks = [
        (t.epochs >= 0, "epochs must be >= 0"),
        (t.batch_size >= 1, "batch_size must be >= 1"),
        (t.learning_rate >= 0, "learning_rate must be >= 0"),
        (t.temperature > 0, "temperature must be > 0"),
        (t.top_k >= 1, "top_k must be >= 1"),
        (t.attr_sample_size >= 1, "attr_sample_size must be >= 1"),
        (t.sinkhorn_reg > 0, "sinkhorn_reg must be > 0"),
        (t.sinkhorn_tol > 0, "sinkhorn_tol must be > 0"),
        (t.sinkhorn_max_iter >= 1, "sinkhorn_max_iter must be >= 1"),
        (t.cov_shrinkage >= 0, "cov_shrinkage must be >= 0"),
        (cfg.mode in MODES, f"mode must be one of {MODES}, got {cfg.mode!r}"),
        (cfg.n_diverse >= 0, "n_diverse must be >= 0"),
        (cfg.increment >= 1, "increment must be >= 1"),
        (cfg.base_size >= 0, "base_size must be >= 0"),
        (cfg.sessions_limit >= 0, "sessions_limit must be >= 0"),
        (all(b >= 0 for b in cfg.eval_betas), "eval betas must be >= 0"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ValueError(msg)


def config_lines(cfg: RunConfig) -> str:
    """Flat, sorted, round-trippable key = value dump."""
    pairs = {}
    for f in dataclasses.fields(RunConfig):
        if f.name == "trainer":
            continue
        val = getattr(cfg, f.name)
        if isinstance(val, list):
            val = ",".join(repr(v) for v in val)
        pairs[f.name] = val
    for f in dataclasses.fields(TrainerConfig):
        pairs[f.name] = getattr(cfg.trainer, f.name)
    return "".join(f"{k} = {pairs[k]!r}\n" if isinstance(pairs[k], str)
                   else f"{k} = {pairs[k]}\n" for k in sorted(pairs))


def config_to_dict(cfg: RunConfig) -> dict:
    """Semantic settings only; filesystem paths stay out so identical runs
    written to different directories produce identical reports."""
    out = dataclasses.asdict(cfg)
    out.pop("bundle", None)
    out.pop("out", None)
    return out


def trainer_from_dict(data: dict) -> TrainerConfig:
    names = {f.name for f in dataclasses.fields(TrainerConfig)}
    return TrainerConfig(**{k: v for k, v in data.items() if k in names})
