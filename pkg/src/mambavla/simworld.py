"""Procedural articulated-object environment.

Three archetypes — drawer (prismatic), door (vertical hinge), lid (horizontal
rear hinge) — built from axis-aligned boxes, rendered by a z-buffer triangle
rasterizer with a pinhole camera (x right, y down, z forward), and driven by a
quasi-static suction interaction: attach on the movable part, pull along the
approach axis, project the pull onto the joint's motion direction.

All randomness flows through per-call numpy Generators seeded explicitly, so
any episode is reproducible from its integer seed alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mambavla.config import SimConfig
from mambavla.policy import EndEffectorPose, lift_to_3d

__all__ = [
    "Box",
    "ArticulatedObject",
    "Scene",
    "RenderResult",
    "Observation",
    "ManipEpisode",
    "ARCHETYPES",
    "spawn_object",
    "render",
    "render_buffers",
    "interact",
    "collect_episode",
    "evaluate",
    "oracle_policy",
    "random_normal_policy",
    "center_pixel_policy",
]

ARCHETYPES = ("drawer", "door", "lid")
_LIGHT = np.array([-0.4, -0.6, -0.7]) / np.linalg.norm([-0.4, -0.6, -0.7])
_AMBIENT, _DIFFUSE = 0.35, 0.6
_BG_COLOR = np.array([0.06, 0.06, 0.08])
_MIN_PART_PIXELS = 0.05      # movable part must cover >= 5% of the frame

PART_BACKGROUND, PART_BASE, PART_MOVABLE = 0, 1, 2


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    kx, ky, kz = axis
    K = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


# ---------------------------------------------------------------------------
# geometry


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray

    def faces(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(4 corner vertices, outward normal) per face, in camera frame."""
        c, h = self.center, self.half
        out = []
        for axis in range(3):
            for sign in (-1.0, 1.0):
                n = np.zeros(3)
                n[axis] = sign
                a, b = (axis + 1) % 3, (axis + 2) % 3
                base = c + h[axis] * n          # n already carries the sign
                ea = np.zeros(3); ea[a] = h[a]
                eb = np.zeros(3); eb[b] = h[b]
                verts = np.stack([base - ea - eb, base + ea - eb,
                                  base + ea + eb, base - ea + eb])
                out.append((verts, n))
        return out

    def triangles(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(3 vertices, outward normal) pairs — two per face."""
        tris = []
        for verts, n in self.faces():
            tris.append((verts[[0, 1, 2]], n))
            tris.append((verts[[0, 2, 3]], n))
        return tris

    def surface_distance(self, p: np.ndarray) -> float:
        """Distance from a point to the box surface (0 inside counts as 0)."""
        d = np.abs(p - self.center) - self.half
        outside = np.linalg.norm(np.maximum(d, 0.0))
        return float(outside)

    def outward_normal_at(self, p: np.ndarray) -> np.ndarray:
        """Outward normal of the face nearest to a point at/near the surface."""
        rel = (p - self.center) / self.half
        axis = int(np.argmax(np.abs(rel)))
        n = np.zeros(3)
        n[axis] = np.sign(rel[axis]) or 1.0
        return n


@dataclass
class ArticulatedObject:
    archetype: str                   # drawer | door | lid
    joint_kind: str                  # prismatic | revolute
    axis: np.ndarray                 # unit joint axis
    pivot: np.ndarray | None         # point on the hinge line (revolute)
    q_min: float
    q_max: float
    q: float
    base_boxes: list[Box]
    movable_box: Box                 # canonical (q = 0) geometry
    base_color: np.ndarray
    movable_color: np.ndarray

    def __post_init__(self):
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValueError("joint axis must be unit length")
        if not (self.q_min <= self.q <= self.q_max):
            raise ValueError(f"q={self.q} outside [{self.q_min}, {self.q_max}]")

    def joint_transform(self, q: float) -> tuple[np.ndarray, np.ndarray]:
        """World pose of the movable part at joint value q: p' = R p + t."""
        if self.joint_kind == "prismatic":
            return np.eye(3), q * self.axis
        R = _axis_angle(self.axis, q)
        return R, self.pivot - R @ self.pivot

    def to_canonical(self, p: np.ndarray) -> np.ndarray:
        """Map a world point onto the movable part's q = 0 frame."""
        R, t = self.joint_transform(self.q)
        return R.T @ (p - t)

    def movable_triangles(self) -> list[tuple[np.ndarray, np.ndarray]]:
        R, t = self.joint_transform(self.q)
        return [((R @ verts.T).T + t, R @ n)
                for verts, n in self.movable_box.triangles()]


@dataclass
class Scene:
    obj: ArticulatedObject
    cam: SimConfig

    def triangles(self):
        """(verts, normal, color, part_id) for every triangle in the scene."""
        for verts, n in [t for b in self.obj.base_boxes for t in b.triangles()]:
            yield verts, n, self.obj.base_color, PART_BASE
        for verts, n in self.obj.movable_triangles():
            yield verts, n, self.obj.movable_color, PART_MOVABLE


# ---------------------------------------------------------------------------
# rasterizer


@dataclass
class RenderResult:
    rgb: np.ndarray       # [H, W, 3] in [0, 1]
    depth: np.ndarray     # [H, W] metres, 0 = no geometry
    part_id: np.ndarray   # [H, W] u8: 0 background, 1 base, 2 movable
    normal: np.ndarray    # [H, W, 3] outward face normal (0 on background)


def _shade(color: np.ndarray, normal: np.ndarray) -> np.ndarray:
    lam = max(0.0, float(normal @ -_LIGHT))
    return np.clip(color * (_AMBIENT + _DIFFUSE * lam), 0.0, 1.0)


def render_buffers(scene: Scene, cam: SimConfig | None = None) -> RenderResult:
    cam = cam or scene.cam
    if cam.fx <= 0 or cam.fy <= 0:
        raise ValueError("render: focal lengths must be positive")
    W, H = cam.width, cam.height
    rgb = np.tile(_BG_COLOR, (H, W, 1)).astype(np.float64)
    depth = np.zeros((H, W))
    zinv = np.zeros((H, W))               # z-buffer keyed on 1/z (0 = empty)
    part = np.zeros((H, W), dtype=np.uint8)
    normal = np.zeros((H, W, 3))

    # pixel-centre grid, shared across triangles
    us = (np.arange(W) + 0.5)
    vs = (np.arange(H) + 0.5)

    for verts, n, color, part_id in scene.triangles():
        z = verts[:, 2]
        if np.min(z) < 1e-3:
            continue                      # behind / at the camera: drop
        px = cam.fx * verts[:, 0] / z + cam.cx
        py = cam.fy * verts[:, 1] / z + cam.cy
        x0, x1 = max(0, int(np.floor(px.min() - 0.5))), \
            min(W - 1, int(np.ceil(px.max() - 0.5)))
        y0, y1 = max(0, int(np.floor(py.min() - 0.5))), \
            min(H - 1, int(np.ceil(py.max() - 0.5)))
        if x0 > x1 or y0 > y1:
            continue
        area2 = (px[1] - px[0]) * (py[2] - py[0]) - (px[2] - px[0]) * (py[1] - py[0])
        if abs(area2) < 1e-12:
            continue                      # edge-on
        gu, gv = np.meshgrid(us[x0:x1 + 1], vs[y0:y1 + 1])
        w0 = ((px[1] - gu) * (py[2] - gv) - (px[2] - gu) * (py[1] - gv)) / area2
        w1 = ((px[2] - gu) * (py[0] - gv) - (px[0] - gu) * (py[2] - gv)) / area2
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        # 1/z is affine in screen space, so this is perspective-correct
        zi = w0 / z[0] + w1 / z[1] + w2 / z[2]
        win = inside & (zi > zinv[y0:y1 + 1, x0:x1 + 1] + 1e-12)
        if not win.any():
            continue
        shade = _shade(color, n)
        sub = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        zinv[sub] = np.where(win, zi, zinv[sub])
        depth[sub] = np.where(win, 1.0 / zi, depth[sub])
        part[sub] = np.where(win, part_id, part[sub])
        for k in range(3):
            rgb[sub][:, :, k] = np.where(win, shade[k], rgb[sub][:, :, k])
            normal[sub][:, :, k] = np.where(win, n[k], normal[sub][:, :, k])
    return RenderResult(rgb=rgb, depth=depth, part_id=part, normal=normal)


def render(scene: Scene, cam: SimConfig | None = None
           ) -> tuple[np.ndarray, np.ndarray]:
    """Scene -> (RGB [H, W, 3] in [0,1], depth [H, W] metres, 0 = empty)."""
    res = render_buffers(scene, cam)
    return res.rgb, res.depth


# ---------------------------------------------------------------------------
# archetype construction


def _draw_colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    base = rng.uniform(0.25, 0.85, size=3)
    while True:
        movable = rng.uniform(0.25, 0.85, size=3)
        if np.max(np.abs(movable - base)) > 0.25:    # visually distinct
            return base, movable


def _build_drawer(rng: np.random.Generator) -> ArticulatedObject:
    w = rng.uniform(0.5, 0.9)          # full widths
    h = rng.uniform(0.4, 0.8)
    d = rng.uniform(0.4, 0.7)
    # wide lateral range: off-axis placements expose the protruding front's
    # side strip, the contact region where a straight pull fails
    cx = rng.uniform(-0.55, 0.55)
    cy = rng.uniform(-0.1, 0.2)
    z0 = rng.uniform(1.3, 1.9)         # cabinet front plane
    base_color, movable_color = _draw_colors(rng)
    body = Box(center=np.array([cx, cy, z0 + d / 2]),
               half=np.array([w / 2, h / 2, d / 2]))
    # chunky protruding front: its top/bottom/side strips render at off-axis
    # placements, giving contact points where a straight pull cannot open the
    # joint (the Appendix-B random-contact baseline must not be degenerate)
    t = 0.22
    front = Box(center=np.array([cx, cy, z0 - t / 2]),
                half=np.array([w / 2 * 0.8, h / 2 * 0.8, t / 2]))
    return ArticulatedObject(
        archetype="drawer", joint_kind="prismatic",
        axis=np.array([0.0, 0.0, -1.0]), pivot=None,
        q_min=0.0, q_max=float(rng.uniform(0.3, 0.6)), q=0.0,
        base_boxes=[body], movable_box=front,
        base_color=base_color, movable_color=movable_color)


def _build_door(rng: np.random.Generator) -> ArticulatedObject:
    w = rng.uniform(0.5, 0.9)
    h = rng.uniform(0.6, 1.0)
    d = rng.uniform(0.3, 0.5)
    cx = rng.uniform(-0.15, 0.15)
    cy = rng.uniform(-0.1, 0.15)
    z0 = rng.uniform(1.3, 1.9)
    base_color, movable_color = _draw_colors(rng)
    frame = Box(center=np.array([cx, cy, z0 + d / 2]),
                half=np.array([w / 2, h / 2, d / 2]))
    t = 0.05
    panel = Box(center=np.array([cx, cy, z0 - t / 2]),
                half=np.array([w / 2 * 0.8, h / 2 * 0.8, t / 2]))
    # hinge on the left or right vertical edge; axis sign set so positive q
    # swings the free edge toward the camera
    if rng.random() < 0.5:
        pivot = np.array([cx - w / 2 * 0.8, cy, z0])
        axis = np.array([0.0, 1.0, 0.0])
    else:
        pivot = np.array([cx + w / 2 * 0.8, cy, z0])
        axis = np.array([0.0, -1.0, 0.0])
    return ArticulatedObject(
        archetype="door", joint_kind="revolute", axis=axis, pivot=pivot,
        q_min=0.0, q_max=float(rng.uniform(1.0, 1.5)), q=0.0,
        base_boxes=[frame], movable_box=panel,
        base_color=base_color, movable_color=movable_color)


def _build_lid(rng: np.random.Generator) -> ArticulatedObject:
    w = rng.uniform(0.6, 1.0)
    h = rng.uniform(0.3, 0.5)          # chest height
    d = rng.uniform(0.5, 0.8)
    cx = rng.uniform(-0.15, 0.15)
    z0 = rng.uniform(1.05, 1.35)       # chest front plane
    y_top = rng.uniform(0.42, 0.6)     # top face well below the camera axis
    base_color, movable_color = _draw_colors(rng)
    chest = Box(center=np.array([cx, y_top + h / 2, z0 + d / 2]),
                half=np.array([w / 2, h / 2, d / 2]))
    # thin slab: the visible top face must dominate the front edge strip so
    # that centroid-style contacts land where the pull can move the joint
    t = 0.03
    lid = Box(center=np.array([cx, y_top - t / 2, z0 + d / 2]),
              half=np.array([w / 2, t / 2, d / 2]))
    # hinge along the rear top edge; -x axis opens the front edge upward
    pivot = np.array([cx, y_top, z0 + d])
    return ArticulatedObject(
        archetype="lid", joint_kind="revolute",
        axis=np.array([-1.0, 0.0, 0.0]), pivot=pivot,
        q_min=0.0, q_max=float(rng.uniform(1.0, 1.5)), q=0.0,
        base_boxes=[chest], movable_box=lid,
        base_color=base_color, movable_color=movable_color)


_BUILDERS = {"drawer": _build_drawer, "door": _build_door, "lid": _build_lid}


def spawn_object(seed: int, kind: str | None = None,
                 cam: SimConfig | None = None) -> Scene:
    """Deterministic scene from an integer seed.

    Redraws geometry (same rng stream, still deterministic) until the movable
    part covers at least 5% of the rendered pixels.
    """
    cam = cam or SimConfig()
    rng = np.random.default_rng(seed)
    if kind is None:
        kind = ARCHETYPES[int(rng.integers(len(ARCHETYPES)))]
    if kind not in _BUILDERS:
        raise ValueError(f"unknown archetype {kind!r}; expected one of {ARCHETYPES}")
    n_pixels = cam.width * cam.height
    for _ in range(50):
        scene = Scene(obj=_BUILDERS[kind](rng), cam=cam)
        buf = render_buffers(scene)
        if np.sum(buf.part_id == PART_MOVABLE) >= _MIN_PART_PIXELS * n_pixels \
                and np.sum(buf.part_id == PART_BASE) >= 0.02 * n_pixels:
            return scene
    raise RuntimeError(f"spawn_object: could not place a visible {kind} "
                       f"after 50 draws (seed {seed})")


# ---------------------------------------------------------------------------
# interaction


def interact(scene: Scene, pose: EndEffectorPose) -> tuple[bool, float]:
    """Suction attach + pull. Pure: does not mutate the scene.

    Attaches iff the 3D contact point lies on the movable part within the
    attach tolerance AND the approach z-axis is within the suction cone of the
    inward surface normal.  The pull retracts along the approach axis
    (displacement = -pull_magnitude * z-axis) and is projected onto the
    joint's motion direction at the contact point, then clamped to limits.
    """
    if pose.a_pos is None:
        raise ValueError("interact: pose has no 3D contact point "
                         "(lift the contact pixel first)")
    obj, cam = scene.obj, scene.cam
    p = np.asarray(pose.a_pos, dtype=np.float64)
    z_axis = np.asarray(pose.a_dir, dtype=np.float64)[:, 2]

    p_canon = obj.to_canonical(p)
    if obj.movable_box.surface_distance(p_canon) > cam.attach_tolerance:
        return False, 0.0
    n_canon = obj.movable_box.outward_normal_at(p_canon)
    R, _ = obj.joint_transform(obj.q)
    n_out = R @ n_canon
    cos_limit = np.cos(np.deg2rad(cam.attach_cone_deg))
    if float(z_axis @ -n_out) < cos_limit:
        return False, 0.0

    pull = -cam.pull_magnitude * z_axis        # retract toward the gripper
    if obj.joint_kind == "prismatic":
        dq_raw = float(pull @ obj.axis)
    else:
        r = p - obj.pivot
        r_perp = r - (r @ obj.axis) * obj.axis
        dist = np.linalg.norm(r_perp)
        if dist < 1e-9:
            dq_raw = 0.0                       # pulling on the hinge line
        else:
            tangent = np.cross(obj.axis, r_perp / dist)
            dq_raw = float(pull @ tangent) / dist
    q_new = float(np.clip(obj.q + dq_raw, obj.q_min, obj.q_max))
    dq = q_new - obj.q
    threshold = (cam.prismatic_threshold if obj.joint_kind == "prismatic"
                 else cam.revolute_threshold)
    return abs(dq) > threshold, dq


# ---------------------------------------------------------------------------
# episodes and evaluation


@dataclass
class Observation:
    rgb: np.ndarray
    depth: np.ndarray
    prompt: str
    cam: SimConfig
    scene: Scene          # ground truth; learned policies must not read it


@dataclass
class ManipEpisode:
    rgb: np.ndarray
    depth: np.ndarray
    prompt: str
    gt_pose: EndEffectorPose
    applied_pose: EndEffectorPose
    success: bool
    dq: float
    seed: int
    archetype: str


_PROMPTS = {
    "drawer": "pull the drawer open",
    "door": "swing the door open",
    "lid": "lift the lid open",
}


def _pose_from_pixel(buf: RenderResult, row: int, col: int, cam: SimConfig,
                     rng: np.random.Generator | None) -> EndEffectorPose:
    """Appendix-B style pose: z = -surface normal, y random orthogonal."""
    h, w = buf.depth.shape
    n_out = buf.normal[row, col]
    z = -_unit(n_out)
    if rng is None:                            # deterministic completion
        seed_vec = np.array([1.0, 0.0, 0.0])
        if abs(seed_vec @ z) > 0.9:
            seed_vec = np.array([0.0, 1.0, 0.0])
    else:
        while True:
            seed_vec = rng.standard_normal(3)
            if np.linalg.norm(seed_vec) > 1e-6 and \
                    abs(_unit(seed_vec) @ z) < 0.99:
                break
    y = _unit(seed_vec - (seed_vec @ z) * z)
    x = np.cross(y, z)
    R = np.stack([x, y, z], axis=1)            # axes as columns
    pixel = ((col + 0.5) / w, (row + 0.5) / h)
    pose = EndEffectorPose(a_dir=R, contact_pixel=pixel)
    pose.a_pos = lift_to_3d(pixel, buf.depth, cam)
    return pose


def collect_episode(seed: int, kind: str | None = None,
                    cam: SimConfig | None = None) -> ManipEpisode:
    """One Appendix-B data-collection episode, reproducible from its seed."""
    cam = cam or SimConfig()
    scene = spawn_object(seed, kind, cam)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    buf = render_buffers(scene)
    rows, cols = np.nonzero(buf.part_id == PART_MOVABLE)
    pick = int(rng.integers(len(rows)))
    pose = _pose_from_pixel(buf, int(rows[pick]), int(cols[pick]), cam, rng)
    success, dq = interact(scene, pose)
    return ManipEpisode(rgb=buf.rgb, depth=buf.depth,
                        prompt=_PROMPTS[scene.obj.archetype],
                        gt_pose=pose, applied_pose=pose,
                        success=success, dq=dq, seed=seed,
                        archetype=scene.obj.archetype)


def evaluate(policy, episodes: int, seed: int, cam: SimConfig | None = None,
             kind: str | None = None) -> tuple[float, list[dict]]:
    """Run a policy over fresh scenes; returns (success rate, per-episode log).

    Scenes cycle the archetypes (or stay on ``kind`` when given); per-episode
    seeds are seed+index, so results are independent of execution order.  A
    policy that raises on a sample or emits an invalid pose scores a failure
    for that episode, not an exception.
    """
    if episodes < 1:
        raise ValueError("evaluate: episodes must be >= 1")
    cam = cam or SimConfig()
    log = []
    successes = 0
    for i in range(episodes):
        ep_seed = seed + i
        archetype = kind if kind is not None else ARCHETYPES[i % len(ARCHETYPES)]
        scene = spawn_object(ep_seed, archetype, cam)
        buf = render_buffers(scene)
        obs = Observation(rgb=buf.rgb, depth=buf.depth,
                          prompt=_PROMPTS[archetype], cam=cam, scene=scene)
        entry = {"episode": i, "seed": ep_seed, "archetype": archetype,
                 "success": False, "dq": 0.0}
        try:
            pose = policy(obs)
            pose.validate()
            if pose.a_pos is None:
                pose.a_pos = lift_to_3d(pose.contact_pixel, buf.depth, cam)
            success, dq = interact(scene, pose)
            entry["success"], entry["dq"] = bool(success), float(dq)
        except ValueError as err:
            entry["error"] = str(err)
        successes += entry["success"]
        log.append(entry)
    return successes / episodes, log


# ---------------------------------------------------------------------------
# reference policies


def oracle_policy(obs: Observation) -> EndEffectorPose:
    """Reads ground truth: contact at the movable pixel nearest the part
    centroid, approach opposite the rendered normal."""
    buf = render_buffers(obs.scene)
    rows, cols = np.nonzero(buf.part_id == PART_MOVABLE)
    if len(rows) == 0:
        raise ValueError("oracle: movable part not visible")
    cr, cc = rows.mean(), cols.mean()
    pick = int(np.argmin((rows - cr) ** 2 + (cols - cc) ** 2))
    return _pose_from_pixel(buf, int(rows[pick]), int(cols[pick]),
                            obs.cam, rng=None)


def random_normal_policy(rng: np.random.Generator):
    """Appendix-B sampler as a policy: random movable pixel, z = -normal."""
    def policy(obs: Observation) -> EndEffectorPose:
        buf = render_buffers(obs.scene)
        rows, cols = np.nonzero(buf.part_id == PART_MOVABLE)
        pick = int(rng.integers(len(rows)))
        return _pose_from_pixel(buf, int(rows[pick]), int(cols[pick]),
                                obs.cam, rng)
    return policy


def center_pixel_policy(obs: Observation) -> EndEffectorPose:
    """Constant baseline: image centre, straight-ahead approach."""
    R = np.eye(3)                       # z column = (0, 0, 1): into the scene
    pose = EndEffectorPose(a_dir=R, contact_pixel=(0.5, 0.5))
    pose.a_pos = lift_to_3d(pose.contact_pixel, obs.depth, obs.cam)
    return pose
