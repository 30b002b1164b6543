"""One serializable bundle describing a whole experiment.

A RunConfig nests the model, routing, training, decoding, and task configs
plus run-directory plumbing. It round-trips through JSON exactly, and CLI
flags address fields by dotted path ("training.alpha=2.0").
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .inference import DecodeConfig
from .model import ModelConfig
from .routing import RoutingConfig
from .tasks import FIRST_SYMBOL, SyntheticTaskSpec
from .training import TrainingConfig

# objectives that only make sense on a given routing mode
_MODE_FOR_OBJECTIVE = {
    "THOR_full": ("thor",),
    "CE1_CR": ("thor",),
    "CE1_CE2": ("thor",),
    "CE1_only": ("thor",),
    "Switch_CE_plus_aux": ("gated_topk", "switch_token", "switch_sentence"),
    "Baseline_CE": ("dense", "switch_random", "gated_topk", "switch_token", "switch_sentence"),
}


def _tiny_model():
    return ModelConfig(
        d_model=32, n_heads=4, d_head=8, d_ff=64, n_enc_layers=2, n_dec_layers=2,
        vocab_src=28, vocab_tgt=28, dropout_rate=0.1, max_seq_len=32,
    )


def _default_routing():
    return RoutingConfig(mode="thor", n_experts=2)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=_tiny_model)
    routing: RoutingConfig = field(default_factory=_default_routing)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    run_dir: str = "runs/default"
    telemetry_interval: int = 50
    val_interval: int = 200

    def __post_init__(self):
        if not self.run_dir:
            raise ValueError("run_dir must be a non-empty path")
        if self.telemetry_interval < 1:
            raise ValueError(f"telemetry_interval must be >= 1, got {self.telemetry_interval}")
        if self.val_interval < 1:
            raise ValueError(f"val_interval must be >= 1, got {self.val_interval}")
        allowed = _MODE_FOR_OBJECTIVE[self.training.objective]
        if self.routing.mode not in allowed:
            raise ValueError(
                f"objective {self.training.objective!r} needs routing mode in {allowed}, "
                f"got {self.routing.mode!r}"
            )
        needed = FIRST_SYMBOL + self.task.vocab_size
        if self.model.vocab_src < needed or self.model.vocab_tgt < needed:
            raise ValueError(
                f"model vocab must cover the task alphabet: need >= {needed}, "
                f"got src={self.model.vocab_src} tgt={self.model.vocab_tgt}"
            )
        if self.decode.max_decode_len > self.model.max_seq_len:
            raise ValueError("decode.max_decode_len must not exceed model.max_seq_len")

    # -- serialization --------------------------------------------------
    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config section(s): {sorted(extra)}")
        return cls(
            model=ModelConfig(**d["model"]),
            routing=RoutingConfig(**d["routing"]),
            training=TrainingConfig(**d["training"]),
            decode=DecodeConfig(**d["decode"]),
            task=SyntheticTaskSpec(**d["task"]),
            run_dir=d.get("run_dir", "runs/default"),
            telemetry_interval=d.get("telemetry_interval", 50),
            val_interval=d.get("val_interval", 200),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())

    def resolved_run_dir(self):
        """run_dir, rooted under $MOELAB_RUN_ROOT when that is set and the
        path is relative."""
        root = os.environ.get("MOELAB_RUN_ROOT")
        if root and not os.path.isabs(self.run_dir):
            return os.path.join(root, self.run_dir)
        return self.run_dir


def apply_overrides(config, assignments):
    """Return a new RunConfig with dotted-path overrides applied.

    Each assignment is "section.field=value"; values parse as JSON first,
    falling back to a raw string. Validation re-runs on the result.
    """
    d = config.to_dict()
    for item in assignments:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like section.field=value")
        path, raw = item.split("=", 1)
        keys = path.split(".")
        node = d
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise ValueError(f"unknown config path {path!r}")
            node = node[key]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ValueError(f"unknown config path {path!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[keys[-1]] = value
    return RunConfig.from_dict(d)
