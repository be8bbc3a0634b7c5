"""Three-stage training protocol: alignment, instruction co-training, and
manipulation fine-tuning.

The composite model owns four named parameter groups — encoder, projector,
lm, head — and the active stage decides which groups the optimizer may touch:
align updates the projector (plus the toy encoder when explicitly flagged),
cotrain updates projector and language model, manip updates only the policy
head.  Frozen groups are guaranteed bit-identical across a stage run.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from mambavla import diffcore as dc
from mambavla import fileio
from mambavla.config import ModelConfig, StageHyperparams, TrainConfig
from mambavla.mamba import LanguageModel, WordTokenizer
from mambavla.policy import PoseHead, direction_loss, position_loss
from mambavla.vispipe import MlpProjector, PatchEncoder, multimodal_forward

__all__ = [
    "STAGES",
    "VlaModel",
    "OptimState",
    "set_stage",
    "cross_entropy_loss",
    "init_optim",
    "adamw_step",
    "run_stage",
    "save_checkpoint",
    "load_checkpoint",
    "param_report",
]

STAGES = ("align", "cotrain", "manip")
GROUPS = ("encoder", "projector", "lm", "head")

_STAGE_GROUPS = {
    "align": ("projector",),
    "cotrain": ("projector", "lm"),
    "manip": ("head",),
}


class VlaModel:
    """Vision encoder + projector + language model + policy head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0,
                 dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = PatchEncoder(cfg, rng, dtype)
        self.projector = MlpProjector(cfg, rng, dtype)
        self.lm = LanguageModel(cfg, rng, dtype)
        self.head = PoseHead(cfg, rng, dtype)
        self.stage: str | None = None
        self.trainable_groups: tuple[str, ...] = ()

    def group_params(self, group: str):
        module = {"encoder": self.encoder, "projector": self.projector,
                  "lm": self.lm, "head": self.head}[group]
        yield from module.named_params()

    def named_params(self):
        """Every parameter exactly once, as ('group.name', tensor)."""
        for group in GROUPS:
            for name, p in self.group_params(group):
                yield f"{group}.{name}", p

    def is_trainable(self, name: str) -> bool:
        return name.split(".", 1)[0] in self.trainable_groups


def set_stage(model: VlaModel, stage: str,
              train_encoder: bool = False) -> VlaModel:
    """Apply the stage's freeze mask; flags are a pure function of the stage."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    groups = _STAGE_GROUPS[stage]
    if stage == "align" and train_encoder:
        groups = ("encoder",) + groups
    model.stage = stage
    model.trainable_groups = groups
    return model


# ---------------------------------------------------------------------------
# losses


def cross_entropy_loss(logits: dc.Tensor, targets, ignore_mask=None) -> dc.Tensor:
    """Mean negative log-softmax of the target class over unmasked positions.

    ignore_mask: optional boolean [L]; True positions are excluded (visual
    and prompt positions carry no supervision).
    """
    L, V = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (L,):
        raise ValueError(f"targets shape {targets.shape} != ({L},)")
    if np.any((targets < 0) | (targets >= V)):
        raise ValueError("cross_entropy: target id outside vocabulary")
    keep = np.ones(L, dtype=bool) if ignore_mask is None \
        else ~np.asarray(ignore_mask, dtype=bool)
    if keep.shape != (L,):
        raise ValueError("ignore_mask must have one entry per position")
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ValueError("cross_entropy: every position is masked")

    dtype = logits.data.dtype
    onehot = np.zeros((L, V), dtype=dtype)
    onehot[np.arange(L), targets] = 1.0
    probs = dc.softmax_rows(logits)
    picked = dc.matmul(dc.mul(probs, dc.tensor(onehot, dtype=dtype)),
                       dc.tensor(np.ones((V, 1), dtype=dtype), dtype=dtype))
    logp = dc.log(picked)                                    # [L, 1]
    # negated mask weights fold the sign into the masked mean
    weights = (-keep.astype(dtype) / n_keep).reshape(1, L)
    return dc.matmul(dc.tensor(weights, dtype=dtype), logp)  # [1, 1]


def _bce_with_logits(logits: dc.Tensor, labels: np.ndarray) -> dc.Tensor:
    """Mean binary cross-entropy: softplus(x) - y*x, from primitives."""
    dtype = logits.data.dtype
    neg_y = dc.tensor(-np.asarray(labels, dtype=dtype)
                      .reshape(logits.data.shape), dtype=dtype)
    per = dc.add(dc.softplus(logits), dc.mul(neg_y, logits))
    return dc.mean_pool(per)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optim(model: VlaModel) -> OptimState:
    state = OptimState()
    for name, p in model.named_params():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(model: VlaModel, grads: dict, state: OptimState, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """Decoupled-weight-decay Adam over the trainable groups only.

    grads maps 'group.name' to a numpy array; missing entries are treated as
    zero gradient (decay still applies).  Non-finite gradients raise, naming
    the parameter group.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in model.named_params():
        if not model.is_trainable(name):
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient in parameter group "
                f"{name.split('.', 1)[0]!r} ({name})")
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


# ---------------------------------------------------------------------------
# batch construction


def _encode_pair(tokenizer: WordTokenizer, prompt: str, answer: str):
    """Teacher-forced ids: inputs [BOS p.. a..], targets [p.. a.. EOS],
    mask ignoring the prompt-token targets."""
    p_ids = tokenizer.encode(prompt)
    a_ids = tokenizer.encode(answer)
    text = [tokenizer.BOS] + p_ids + a_ids + [tokenizer.EOS]
    inputs, targets = text[:-1], text[1:]
    ignore = np.zeros(len(targets), dtype=bool)
    ignore[:len(p_ids)] = True            # targets that are prompt tokens
    return inputs, np.asarray(targets), ignore


def _stage1_sample_loss(model: VlaModel, tokenizer: WordTokenizer,
                        row: dict) -> dc.Tensor:
    inputs, targets, ignore = _encode_pair(tokenizer, row["prompt"],
                                           row["answer"])
    out = multimodal_forward(model.encoder, model.projector, model.lm,
                             np.asarray(row["image"]), inputs)
    return cross_entropy_loss(out.text_logits, targets, ignore)


def _backbone_hidden(model: VlaModel, tokenizer: WordTokenizer,
                     image: np.ndarray, prompt: str) -> np.ndarray:
    ids = [tokenizer.BOS] + tokenizer.encode(prompt)
    out = multimodal_forward(model.encoder, model.projector, model.lm,
                             np.asarray(image), ids)
    return out.hidden.data.copy()


def _check_schema(stage: str, dataset) -> None:
    if len(dataset) == 0:
        raise ValueError("run_stage: dataset is empty")
    stage1_keys = {"image", "prompt", "answer"}
    manip_keys = {"image", "prompt", "pos_uv", "rot"}
    want = manip_keys if stage == "manip" else stage1_keys
    for row in dataset:
        if not isinstance(row, dict) or not want.issubset(row):
            raise ValueError(
                f"dataset schema mismatch for stage {stage!r}: "
                f"rows need keys {sorted(want)}")


# ---------------------------------------------------------------------------
# stage runner


def run_stage(model: VlaModel, stage: str, dataset: list, epochs: int,
              hyper: StageHyperparams, train_cfg: TrainConfig,
              tokenizer: WordTokenizer, seed: int = 0,
              out_dir: str | None = None, steps_limit: int | None = None):
    """Train one stage; returns (metrics rows, checkpoint path or None).

    Per-step metrics go to `metrics_{stage}.csv` and the final weights to
    `ckpt_{stage}.rmck` when out_dir is given.  Parameters outside the
    stage's trainable set are bit-identical before and after.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    _check_schema(stage, dataset)
    set_stage(model, stage, train_cfg.train_encoder)
    state = init_optim(model)
    rng = np.random.default_rng(seed)
    params = dict(model.named_params())

    cache = None
    if stage == "manip":
        # the backbone is frozen in stage 2, so its features are constants:
        # compute them once per sample instead of once per step
        cache = [_backbone_hidden(model, tokenizer, row["image"],
                                  row["prompt"]) for row in dataset]

    metrics = []
    step = 0
    done = False
    for _ in range(epochs):
        if done:
            break
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            t0 = time.perf_counter()
            if stage == "manip":
                losses = []
                pixels, rots = [], []
                grip_logits, grip_labels = [], []
                for idx in batch:
                    hidden = dc.tensor(cache[idx],
                                       dtype=cache[idx].dtype)
                    out = model.head.forward(hidden)
                    pixels.append(out.pixel)
                    rots.append(out.rot)
                    row = dataset[idx]
                    if out.gripper_logit is not None and \
                            row.get("gripper") is not None:
                        grip_logits.append(out.gripper_logit)
                        grip_labels.append(float(row["gripper"]))
                gt_uv = np.stack([dataset[i]["pos_uv"] for i in batch])
                gt_rot = np.stack([dataset[i]["rot"] for i in batch])
                loss = dc.add(position_loss(dc.concat(pixels, axis=0), gt_uv),
                              direction_loss(rots, gt_rot))
                if grip_logits:
                    loss = dc.add(loss, _bce_with_logits(
                        dc.concat(grip_logits, axis=0),
                        np.asarray(grip_labels).reshape(-1, 1)))
            else:
                per_sample = [_stage1_sample_loss(model, tokenizer,
                                                  dataset[idx])
                              for idx in batch]
                loss = dc.mean_pool(dc.concat(per_sample, axis=0))

            grads_by_tensor = dc.backward(loss)
            grads = {name: grads_by_tensor[p] for name, p in params.items()
                     if p in grads_by_tensor}
            adamw_step(model, grads, state, lr=hyper.lr,
                       betas=(train_cfg.beta1, train_cfg.beta2),
                       eps=train_cfg.adam_eps,
                       weight_decay=hyper.weight_decay)
            step += 1
            metrics.append({"step": step, "stage": stage,
                            "loss": float(loss.data.reshape(-1)[0]),
                            "lr": hyper.lr,
                            "wall_ms": (time.perf_counter() - t0) * 1e3})
            if steps_limit is not None and step >= steps_limit:
                done = True
                break

    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, f"metrics_{stage}.csv")
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["step", "stage", "loss", "lr", "wall_ms"])
            writer.writeheader()
            writer.writerows(metrics)
        ckpt_path = os.path.join(out_dir, f"ckpt_{stage}.rmck")
        save_checkpoint(model, ckpt_path)
    return metrics, ckpt_path


# ---------------------------------------------------------------------------
# checkpointing and reporting


def save_checkpoint(model: VlaModel, path: str) -> None:
    tensors = {name: p.data for name, p in model.named_params()}
    config = {"model": vars(model.cfg).copy(),
              "stage": model.stage or ""}
    fileio.write_rmck(path, tensors, config)


def load_checkpoint(path: str) -> VlaModel:
    tensors, config = fileio.read_rmck(path)
    cfg_dict = config.get("model")
    if not isinstance(cfg_dict, dict):
        raise fileio.FormatError("checkpoint config missing 'model' record")
    known = {f.name for f in ModelConfig.__dataclass_fields__.values()}
    unknown = set(cfg_dict) - known
    if unknown:
        raise fileio.FormatError(
            f"checkpoint config has unknown fields {sorted(unknown)}")
    cfg = ModelConfig(**cfg_dict)
    model = VlaModel(cfg, seed=0)
    names = {name for name, _ in model.named_params()}
    if names != set(tensors):
        missing = sorted(names - set(tensors))[:3]
        extra = sorted(set(tensors) - names)[:3]
        raise fileio.FormatError(
            f"checkpoint tensors do not match the model: "
            f"missing {missing}, unexpected {extra}")
    for name, p in model.named_params():
        t = tensors[name]
        if t.shape != p.data.shape:
            raise fileio.FormatError(
                f"checkpoint tensor {name!r} has shape {t.shape}, "
                f"expected {p.data.shape}")
        p.data = t.astype(p.data.dtype)
    if config.get("stage"):
        set_stage(model, config["stage"])
    return model


def param_report(model: VlaModel) -> dict:
    """Exact per-group parameter counts and the active-stage trainable ratio."""
    groups = {}
    for group in GROUPS:
        groups[group] = int(sum(p.data.size
                                for _, p in model.group_params(group)))
    total = sum(groups.values())
    trainable = sum(groups[g] for g in model.trainable_groups)
    return {"groups": groups, "total": total,
            "stage": model.stage, "trainable": trainable,
            "ratio": trainable / total if total else 0.0}
