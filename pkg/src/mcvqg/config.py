"""Run configuration: one strict dataclass tree mirroring the config file.

Parsing rejects unknown keys outright (a typo never becomes a silent
default) and `validate` enforces the structural invariants. The VARIANTS
table maps the named model variants from the ablation grid onto field
overrides.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .cues import CUE_NAMES
from .decoder import MumcConfig
from .model import COMBINERS

DROPOUT_KINDS = ("none", "bernoulli", "gaussian")
OPTIMIZERS = ("sgd", "adam")
DECISION_MODES = ("deterministic", "mc")
BLEU_MODES = ("max", "corpus")


@dataclass
class DropoutConfig:
    rate: float = 0.3
    kind: str = "bernoulli"


@dataclass
class OptimizerConfig:
    algorithm: str = "sgd"
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int = 16


@dataclass
class RunConfig:
    cues: tuple = ("image", "place", "caption", "tag")
    combiner: str = "moderator"
    enc_dim: int = 32            # shared cue/fusion width d
    embed_dim: int = 24
    hidden_dim: int = 32         # decoder LSTM width
    image_dim: int = 32
    place_dim: int = 32
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mumc_enabled: bool = True
    mumc: MumcConfig = field(default_factory=MumcConfig)
    seed: int = 0
    val_fraction: float = 0.1
    max_len: int = 16
    eval_mc_samples: int = 50
    mc_inference: bool = True    # False: dropout stays off at decision time
    decision_mode: str = "deterministic"
    bleu_mode: str = "max"
    smooth_bleu: bool = False
    track_val_bleu: bool = False
    share_embedding: bool = True
    share_caption_tag_out: bool = False
    per_category_tags: bool = False
    temperature: float = 1.0
    dataset: str = ""
    out_dir: str = ""

    def validate(self):
        cues = set(self.cues)
        if not cues:
            raise ValueError("cue set must be nonempty")
        unknown = cues - set(CUE_NAMES)
        if unknown:
            raise ValueError(f"unknown cues: {sorted(unknown)}")
        if len(cues) >= 2 and "image" not in cues:
            raise ValueError("multi-cue fusion requires the image cue")
        if self.combiner not in COMBINERS:
            raise ValueError(f"combiner must be one of {COMBINERS}")
        for name in ("enc_dim", "embed_dim", "hidden_dim", "image_dim",
                     "place_dim", "max_len", "eval_mc_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not (0.0 <= self.dropout.rate < 1.0):
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout.rate}")
        if self.dropout.kind not in DROPOUT_KINDS:
            raise ValueError(f"dropout kind must be one of {DROPOUT_KINDS}")
        if self.optimizer.algorithm not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.optimizer.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer.epochs < 1 or self.optimizer.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        self.mumc.validate()
        if self.mumc.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.mumc.alpha}")
        if self.mumc.uncertainty_weight < 0:
            raise ValueError("uncertainty weight must be nonnegative")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValueError("validation fraction must be in [0, 1)")
        if self.decision_mode not in DECISION_MODES:
            raise ValueError(f"decision mode must be one of {DECISION_MODES}")
        if self.bleu_mode not in BLEU_MODES:
            raise ValueError(f"bleu mode must be one of {BLEU_MODES}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        return self


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise ValueError(f"config section {path or 'top level'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        where = f" in {path}" if path else ""
        raise ValueError(f"unknown config keys{where}: {sorted(unknown)} "
                         f"(valid: {sorted(fields)})")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        nested = {"dropout": DropoutConfig, "optimizer": OptimizerConfig,
                  "mumc": MumcConfig}.get(name)
        if nested is not None:
            kwargs[name] = _from_dict(nested, value, f"{path}.{name}" if path else name)
        elif name == "cues":
            if not isinstance(value, (list, tuple)):
                raise ValueError("cues must be a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    """Strict parse: every key must name a RunConfig field."""
    return _from_dict(RunConfig, data, "")


def config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["cues"] = list(cfg.cues)
    return out


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"config file {path} is not valid JSON: {e}") from e
    return config_from_dict(data)


def save_config(path, cfg: RunConfig):
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


# Named variants of the ablation grid. "S" rows train with dropout but keep
# it off at decision time; "B" rows sample at decision time too; the mixture
# rows replace the moderator with plain concatenation.
VARIANTS = {
    "MC-SMix": {"combiner": "mixture", "dropout": {"rate": 0.0, "kind": "none"}},
    "MC-BMix": {"combiner": "mixture", "dropout": {"kind": "bernoulli"}},
    "MC-SMN": {"combiner": "moderator", "dropout": {"kind": "bernoulli"},
               "mc_inference": False},
    "MC-BMN": {"combiner": "moderator", "dropout": {"kind": "bernoulli"}},
    "MC-BMN-G": {"combiner": "moderator", "dropout": {"kind": "gaussian"}},
}


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """New config with dotted-or-nested field overrides applied."""
    data = config_to_dict(cfg)
    for key, value in overrides.items():
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node:
                raise ValueError(f"unknown config key {key!r}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(value, dict) and isinstance(node[leaf], dict):
            node[leaf] = {**node[leaf], **value}
        else:
            node[leaf] = value
    return config_from_dict(data)


def variant_config(cfg: RunConfig, name: str) -> RunConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r} (valid: {sorted(VARIANTS)})")
    return apply_overrides(cfg, VARIANTS[name])
