"""Dataclass configs for the model, the trainer, and the simulator.

Every run is fully described by (ModelConfig, TrainConfig, SimConfig, seed).
The CLI can override any field from a flat ``key = value`` text file; see
`load_kv_file` / `apply_overrides`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


@dataclass
class ModelConfig:
    # vision encoder
    image_size: int = 32          # square RGB input, pixels
    patch_size: int = 8           # non-overlapping patches -> (image_size/patch_size)^2 tokens
    d_vis: int = 64               # patch embedding width
    # projector (2-layer MLP, vision width -> LM width)
    proj_hidden: int = 256
    # language model
    vocab_size: int = 2048        # fixed table size; tokenizer ids must stay below this
    d_model: int = 256
    n_blocks: int = 6
    d_state: int = 8              # SSM state size N per channel
    d_conv: int = 4               # causal depthwise conv width
    expand: int = 2               # d_inner = expand * d_model
    dt_rank: int = 16             # low-rank bottleneck for the delta projection (d_model / 16)
    tie_embeddings: bool = False
    # policy head
    head_variant: str = "mlp2"    # mlp2 | mlp1 | ssm-mlp
    head_hidden: int = 32
    pool: str = "mean"            # mean | max pooling over sequence positions
    predict_gripper: bool = False
    # numerics
    dtype: str = "float32"        # float32 | float64

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def n_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side


@dataclass
class StageHyperparams:
    lr: float
    weight_decay: float
    epochs: int


@dataclass
class TrainConfig:
    # per-stage defaults; acceptance-style overfit runs override lr via the CLI/config
    align: StageHyperparams = field(
        default_factory=lambda: StageHyperparams(lr=2e-5, weight_decay=0.0, epochs=1)
    )
    cotrain: StageHyperparams = field(
        default_factory=lambda: StageHyperparams(lr=2e-5, weight_decay=0.0, epochs=2)
    )
    manip: StageHyperparams = field(
        default_factory=lambda: StageHyperparams(lr=1e-5, weight_decay=0.1, epochs=5)
    )
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    grad_accum: int = 1
    train_encoder: bool = False   # when True the align stage also warm-starts the toy encoder
    log_every: int = 10


@dataclass
class SimConfig:
    # camera: x right, y down, z forward; intrinsics in pixels
    width: int = 32
    height: int = 32
    fx: float = 28.0
    fy: float = 28.0
    cx: float = 16.0
    cy: float = 16.0
    # suction interaction
    attach_tolerance: float = 1e-2    # max contact-point distance to the movable part, metres
    attach_cone_deg: float = 60.0     # max angle between approach z-axis and inward normal
    pull_magnitude: float = 0.25      # metres, applied along the retract direction
    # success thresholds on the achieved joint displacement
    prismatic_threshold: float = 0.1  # metres
    revolute_threshold: float = 0.1   # radians


# ---------------------------------------------------------------------------
# flat key=value config files


def load_kv_file(path: str) -> dict[str, str]:
    """Parse a flat ``key = value`` UTF-8 text file.

    Blank lines and lines starting with '#' are ignored.  Raises ValueError
    on a line without '='.
    """
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _coerce(raw: str, target_type: type):
    if target_type is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse {raw!r} as bool")
    return target_type(raw)


def apply_overrides(configs: tuple, overrides: dict[str, str]) -> None:
    """Apply flat key=value overrides onto dataclass configs in place.

    Keys address either a top-level field (``d_model``) or a nested stage
    field (``align.lr``).  Unknown keys raise ValueError so typos fail loudly.
    """
    for key, raw in overrides.items():
        head, _, tail = key.partition(".")
        applied = False
        for cfg in configs:
            if not dataclasses.is_dataclass(cfg):
                continue
            names = {f.name: f for f in dataclasses.fields(cfg)}
            if head not in names:
                continue
            if tail:
                sub = getattr(cfg, head)
                subnames = {f.name: f for f in dataclasses.fields(sub)}
                if tail not in subnames:
                    raise ValueError(f"unknown config key {key!r}")
                setattr(sub, tail, _coerce(raw, type(getattr(sub, tail))))
            else:
                setattr(cfg, head, _coerce(raw, type(getattr(cfg, head))))
            applied = True
            break
        if not applied:
            raise ValueError(f"unknown config key {key!r}")
