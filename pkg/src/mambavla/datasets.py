"""Procedural toy corpora for the three training stages.

Stage 1.1 pairs rendered scenes with captions describing their shape, color,
and placement.  Stage 1.2 mixes those captions with instruction QA derived
from the simulator (planning strings and affordance yes/no).  Stage 2 is the
Appendix-B-style episode set: RGB+depth frames with ground-truth contact
poses.  Every generator is a pure function of its seed, and the on-disk form
(RMIM frames + JSON-lines manifest) regenerates byte-identically.
"""

from __future__ import annotations

import os

import numpy as np

from mambavla import fileio, simworld
from mambavla.config import SimConfig

__all__ = [
    "color_name",
    "describe_scene",
    "corpus_texts",
    "make_caption_samples",
    "make_instruct_samples",
    "make_manip_samples",
    "episode_rows",
    "write_stage1_dataset",
    "write_manip_dataset",
    "load_stage1_dataset",
    "load_manip_dataset",
]

_COLOR_NAMES = {
    "red": (0.80, 0.30, 0.30),
    "green": (0.30, 0.75, 0.35),
    "blue": (0.30, 0.40, 0.80),
    "yellow": (0.80, 0.75, 0.30),
    "purple": (0.60, 0.35, 0.75),
    "teal": (0.30, 0.70, 0.70),
    "gray": (0.55, 0.55, 0.55),
    "brown": (0.60, 0.45, 0.30),
}

_PLACES = ("left side", "middle", "right side")

_CAPTION_TEMPLATES = (
    "a {color} {kind} in the {place}",
    "the {color} {kind} sits in the {place}",
)

_PLANS = {
    "drawer": "grip the front face and pull it straight back",
    "door": "grip the free edge and swing it outward",
    "lid": "press the top face and lift it upward",
}

_PROMPT_CAPTION = "describe the scene"
_PROMPT_PLAN = "how should the robot open the {kind} ?"
_PROMPT_AFFORD = "is there a {kind} to open here ?"


def color_name(rgb: np.ndarray) -> str:
    """Nearest named color by Euclidean distance."""
    names = list(_COLOR_NAMES)
    dist = [np.linalg.norm(np.asarray(rgb) - np.asarray(_COLOR_NAMES[n]))
            for n in names]
    return names[int(np.argmin(dist))]


def _place(cx: float) -> str:
    if cx < -0.15:
        return _PLACES[0]
    if cx > 0.15:
        return _PLACES[2]
    return _PLACES[1]


def describe_scene(scene: simworld.Scene, template: int = 0) -> str:
    obj = scene.obj
    return _CAPTION_TEMPLATES[template % len(_CAPTION_TEMPLATES)].format(
        color=color_name(obj.movable_color), kind=obj.archetype,
        place=_place(float(obj.movable_box.center[0])))


def corpus_texts() -> list[str]:
    """Deterministic enumeration of every string the generators can emit.

    Fitting the tokenizer on this keeps the vocabulary stable no matter which
    seeds the datasets were drawn with.
    """
    texts = []
    for kind in simworld.ARCHETYPES:
        for color in _COLOR_NAMES:
            for place in _PLACES:
                for i, tpl in enumerate(_CAPTION_TEMPLATES):
                    texts.append(tpl.format(color=color, kind=kind,
                                            place=place))
        texts.append(_PROMPT_PLAN.format(kind=kind))
        texts.append(_PROMPT_AFFORD.format(kind=kind))
        texts.append(_PLANS[kind])
        texts.append(simworld._PROMPTS[kind])
    texts.extend([_PROMPT_CAPTION, "yes", "no"])
    return texts


# ---------------------------------------------------------------------------
# in-memory generators (training and tests consume these directly)


def make_caption_samples(n: int, seed: int,
                         cam: SimConfig | None = None) -> list[dict]:
    """Stage-1.1 rows: {image: [H,W,3] array, prompt, answer}."""
    if n < 1:
        raise ValueError("caption dataset needs n >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 10]))
    rows = []
    for i in range(n):
        kind = simworld.ARCHETYPES[i % len(simworld.ARCHETYPES)]
        scene = simworld.spawn_object(seed + i, kind, cam)
        rgb, _ = simworld.render(scene)
        rows.append({
            "image": rgb.astype(np.float32),
            "prompt": _PROMPT_CAPTION,
            "answer": describe_scene(scene, template=int(rng.integers(2))),
        })
    return rows


def make_instruct_samples(n: int, seed: int,
                          cam: SimConfig | None = None) -> list[dict]:
    """Stage-1.2 rows: captions mixed with planning and affordance QA."""
    if n < 1:
        raise ValueError("instruct dataset needs n >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    rows = []
    for i in range(n):
        kind = simworld.ARCHETYPES[i % len(simworld.ARCHETYPES)]
        scene = simworld.spawn_object(seed + 1000 + i, kind, cam)
        rgb, _ = simworld.render(scene)
        mode = i % 4
        if mode == 0:
            prompt = _PROMPT_CAPTION
            answer = describe_scene(scene, template=int(rng.integers(2)))
        elif mode == 1:
            prompt = _PROMPT_PLAN.format(kind=kind)
            answer = _PLANS[kind]
        else:
            # affordance: half the questions name the rendered archetype,
            # half name a different one, so "yes"/"no" are both grounded
            asked = kind if mode == 2 else \
                simworld.ARCHETYPES[(i + 1) % len(simworld.ARCHETYPES)]
            prompt = _PROMPT_AFFORD.format(kind=asked)
            answer = "yes" if asked == kind else "no"
        rows.append({"image": rgb.astype(np.float32),
                     "prompt": prompt, "answer": answer})
    return rows


def make_manip_samples(n: int, seed: int, cam: SimConfig | None = None,
                       kind: str | None = None,
                       successful_only: bool = False) -> list[simworld.ManipEpisode]:
    """Stage-2 episodes; per-episode seeds are seed+index.

    With successful_only, failed episodes are dropped (the Appendix-B recipe
    trains on successful samples), drawing extra seeds until n remain.
    """
    if n < 1:
        raise ValueError("manip dataset needs n >= 1")
    episodes = []
    offset = 0
    while len(episodes) < n:
        ep = simworld.collect_episode(seed + offset, kind, cam)
        offset += 1
        if successful_only and not ep.success:
            continue
        episodes.append(ep)
        if offset > 20 * n + 100:
            raise RuntimeError("manip dataset: too many failed episodes")
    return episodes


def episode_rows(episodes: list[simworld.ManipEpisode]) -> list[dict]:
    """Stage-2 training rows (manifest schema, arrays in memory)."""
    rows = []
    for ep in episodes:
        pose = ep.gt_pose
        rows.append({
            "image": ep.rgb.astype(np.float32),
            "depth": ep.depth.astype(np.float32),
            "prompt": ep.prompt,
            "pos_uv": (float(pose.contact_pixel[0]),
                       float(pose.contact_pixel[1])),
            "rot": np.asarray(pose.a_dir, dtype=np.float64),
            "gripper": None if pose.gripper is None else int(pose.gripper),
            "success": bool(ep.success),
            "dq": float(ep.dq),
            "seed": int(ep.seed),
        })
    return rows


# ---------------------------------------------------------------------------
# on-disk form


def write_stage1_dataset(out_dir: str, rows: list[dict]) -> str:
    """Write RMIM frames + manifest; returns the manifest path."""
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    manifest = []
    for i, row in enumerate(rows):
        rel = os.path.join("images", f"frame_{i:05d}.rmim")
        fileio.write_rmim(os.path.join(out_dir, rel),
                          np.asarray(row["image"], dtype=np.float32))
        manifest.append({"image": rel, "prompt": row["prompt"],
                         "answer": row["answer"]})
    path = os.path.join(out_dir, "manifest.jsonl")
    fileio.write_jsonl(path, manifest)
    return path


def write_manip_dataset(out_dir: str,
                        episodes: list[simworld.ManipEpisode]) -> str:
    """Write RGB+depth RMIM frames + the stage-2 manifest schema."""
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    manifest = []
    for i, ep in enumerate(episodes):
        rel = os.path.join("images", f"episode_{i:05d}.rmim")
        fileio.write_rmim(os.path.join(out_dir, rel),
                          ep.rgb.astype(np.float32),
                          depth=ep.depth.astype(np.float32))
        pose = ep.gt_pose
        manifest.append({
            "image": rel,
            "prompt": ep.prompt,
            "pos_uv": [float(pose.contact_pixel[0]),
                       float(pose.contact_pixel[1])],
            "rot": [float(x) for x in np.asarray(pose.a_dir).reshape(-1)],
            "gripper": None if pose.gripper is None else int(pose.gripper),
            "success": bool(ep.success),
            "dq": float(ep.dq),
            "seed": int(ep.seed),
        })
    path = os.path.join(out_dir, "manifest.jsonl")
    fileio.write_jsonl(path, manifest)
    return path


def load_stage1_dataset(out_dir: str) -> list[dict]:
    rows = fileio.read_jsonl(os.path.join(out_dir, "manifest.jsonl"))
    out = []
    for row in rows:
        for key in ("image", "prompt", "answer"):
            if key not in row:
                raise fileio.FormatError(f"stage-1 manifest row missing {key!r}")
        rgb, _ = fileio.read_rmim(os.path.join(out_dir, row["image"]))
        out.append({"image": rgb, "prompt": row["prompt"],
                    "answer": row["answer"]})
    return out


def load_manip_dataset(out_dir: str) -> list[dict]:
    """Rows with image/depth arrays plus the manifest pose fields."""
    rows = fileio.read_jsonl(os.path.join(out_dir, "manifest.jsonl"))
    out = []
    for row in rows:
        for key in ("image", "prompt", "pos_uv", "rot", "success"):
            if key not in row:
                raise fileio.FormatError(f"manip manifest row missing {key!r}")
        rgb, depth = fileio.read_rmim(os.path.join(out_dir, row["image"]))
        if depth is None:
            raise fileio.FormatError(
                f"manip frame {row['image']!r} has no depth channel")
        rot = np.asarray(row["rot"], dtype=np.float64)
        if rot.size != 9:
            raise fileio.FormatError("manip manifest rot must have 9 floats")
        out.append({"image": rgb, "depth": depth, "prompt": row["prompt"],
                    "pos_uv": tuple(row["pos_uv"]),
                    "rot": rot.reshape(3, 3),
                    "gripper": row.get("gripper"),
                    "success": bool(row["success"]),
                    "dq": float(row.get("dq", 0.0)),
                    "seed": int(row.get("seed", 0))})
    return out
