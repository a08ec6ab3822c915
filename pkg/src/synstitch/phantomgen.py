"""Sector-FOV ultrasound-like phantom sequences with exact ground truth.

Each subject owns a static scene drawn on an enlarged canvas.  Frame ``k`` is
the scene rendered through the cumulative content motion ``motion_log[k]``
and cut by a probe-fixed sector mask, so landmarks and inter-frame transforms
are known exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .storage import read_f32, read_json, write_f32, write_json

MIN_LANDMARKS = 10
ROLES = ("sspgm_train", "curated", "stitch_eval")


class PhantomError(ValueError):
    pass


def default_fov(size):
    """Apex slightly above the top edge, 60 degree sector reaching the bottom rows."""
    return dict(
        apex=((size - 1) / 2.0, -0.05 * size),
        radius_range=(0.2 * size, 1.0 * size),
        angle_deg=60.0,
    )


def gen_fov_mask(h, w, apex, radius_range, angle_deg):
    """Annular sector opening downwards (+y) from ``apex``."""
    if not 0.0 < angle_deg <= 360.0:
        raise PhantomError(f"sector angle {angle_deg} outside (0, 360]")
    r0, r1 = radius_range
    if r0 < 0 or r1 <= r0:
        raise PhantomError(f"bad radius range {radius_range}")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xs - apex[0]
    dy = ys - apex[1]
    r = np.hypot(dx, dy)
    ang = np.degrees(np.arctan2(dx, dy))
    inside = (r >= r0) & (r <= r1) & (np.abs(ang) <= angle_deg / 2.0)
    return inside.astype(np.uint8)


@dataclass
class Scene:
    canvas: np.ndarray
    margin: int

    def render(self, a, shape):
        """Scene content seen through content motion ``a`` on an image grid."""
        h, w = shape
        inv = np.linalg.inv(a.matrix)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2] + self.margin
        sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2] + self.margin
        return geo.sample_image(self.canvas, sx, sy, "bilinear")


@dataclass
class PhantomSubject:
    subject_id: str
    frames: list
    fov_mask: np.ndarray
    landmarks: list
    motion_log: list
    scene: Scene | None = field(default=None, repr=False)

    @property
    def size(self):
        return self.fov_mask.shape[0]

    def render(self, a):
        """FOV-cut frame of the scene under an arbitrary content motion."""
        img = self.scene.render(a, self.fov_mask.shape) * self.fov_mask
        return img.astype(np.float32)


def _smooth_noise(rng, shape, sigma):
    g = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return g / (g.std() + 1e-12)


TISSUE = dict(base=0.32, organ=0.10, capsule=0.15, blob=(0.06, 0.12), speckle=0.25)


def _make_scene(rng, size, fov):
    margin = size // 2
    n = size + 2 * margin
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    xs -= margin
    ys -= margin

    # mid-grey parenchyma, so the sector edge is the strongest edge in the frame
    tex = TISSUE["base"] + 0.03 * _smooth_noise(rng, (n, n), 3.0)

    # organ: soft-edged ellipse with a bright capsule
    cx = (size - 1) / 2.0 + rng.uniform(-0.06, 0.06) * size
    cy = 0.58 * size + rng.uniform(-0.05, 0.05) * size
    a = rng.uniform(0.26, 0.34) * size
    b = rng.uniform(0.17, 0.24) * size
    phi = rng.uniform(0.0, math.pi)
    c, s = math.cos(phi), math.sin(phi)
    u = (xs - cx) * c + (ys - cy) * s
    v = -(xs - cx) * s + (ys - cy) * c
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    edge = (1.0 - rho) * b
    tex += TISSUE["organ"] / (1.0 + np.exp(-edge / 0.8))
    tex += TISSUE["capsule"] * np.exp(-((edge / 1.2) ** 2))

    anchors = [(cx, cy)]
    for k in range(8):
        ang = 2 * math.pi * k / 8
        pu, pv = 0.7 * a * math.cos(ang), 0.7 * b * math.sin(ang)
        anchors.append((cx + pu * c - pv * s, cy + pu * s + pv * c))

    for _ in range(int(rng.integers(2, 5))):
        ang = rng.uniform(0, 2 * math.pi)
        rr = rng.uniform(0.0, 0.5)
        pu, pv = rr * a * math.cos(ang), rr * b * math.sin(ang)
        bx, by = cx + pu * c - pv * s, cy + pu * s + pv * c
        br = rng.uniform(0.05, 0.09) * size
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(*TISSUE["blob"])
        d = np.hypot(xs - bx, ys - by)
        tex += amp / (1.0 + np.exp((d - br) / 0.8))
        anchors.append((bx, by))

    # acoustic shadow cast from the frame-0 apex
    ax, ay = fov["apex"]
    half = fov["angle_deg"] / 2.0
    centre = rng.uniform(-half + 6.0, half - 6.0)
    width = rng.uniform(4.0, 8.0)
    start = rng.uniform(0.55, 0.8) * size
    ang = np.degrees(np.arctan2(xs - ax, ys - ay))
    r = np.hypot(xs - ax, ys - ay)
    wedge = 1.0 / (1.0 + np.exp((np.abs(ang - centre) - width / 2) / 1.0))
    wedge *= 1.0 / (1.0 + np.exp(-(r - start) / 1.5))
    tex *= 1.0 - 0.65 * wedge

    # multiplicative log-normal speckle, tied to the tissue
    sigma = TISSUE["speckle"]
    g = _smooth_noise(rng, (n, n), 0.7)
    tex *= np.exp(sigma * g - sigma**2 / 2)

    canvas = np.clip(tex, 0.02, 1.0)
    return Scene(canvas, margin), np.array(anchors)


def _motion_walk(rng, n_frames, center, walk):
    p = np.array([0.0, 0.0, 0.0, 1.0])
    step = np.array(walk["step"])
    lo = np.array([-walk["t"], -walk["t"], -walk["theta"], 1.0 - walk["s"]])
    hi = np.array([walk["t"], walk["t"], walk["theta"], 1.0 + walk["s"]])
    log = [geo.AffineTransform.identity(center)]
    for _ in range(1, n_frames):
        drift = rng.uniform(-step, step)
        p = p.copy()
        p[:3] = 0.85 * p[:3]
        p[3] = 1.0 + 0.85 * (p[3] - 1.0)
        p = np.clip(p + drift, lo, hi)
        log.append(geo.params_to_matrix(dict(tx=p[0], ty=p[1], theta=p[2], sx=p[3], sy=p[3]), center))
    return log


DEFAULT_WALK = dict(step=(1.5, 1.5, math.pi / 160, 0.01), t=5.0, theta=math.pi / 40, s=0.05)


def gen_subject(seed, n_frames, size, subject_id=None, walk=None):
    """Generate one phantom subject; deterministic in ``seed``."""
    if n_frames < 1:
        raise PhantomError("n_frames must be >= 1")
    walk = walk or DEFAULT_WALK
    fov = default_fov(size)
    mask = gen_fov_mask(size, size, **fov)
    center = geo.image_center((size, size))
    rng = np.random.default_rng(seed)
    for _attempt in range(50):
        scene, anchors = _make_scene(rng, size, fov)
        motion = _motion_walk(rng, n_frames, center, walk)
        keep = np.ones(len(anchors), dtype=bool)
        for a in motion:
            pts = a.apply(anchors)
            ix = np.floor(pts[:, 0] + 0.5).astype(int)
            iy = np.floor(pts[:, 1] + 0.5).astype(int)
            ok = (ix >= 0) & (ix < size) & (iy >= 0) & (iy < size)
            ok[ok] &= mask[iy[ok], ix[ok]].astype(bool)
            keep &= ok
        if keep.sum() >= MIN_LANDMARKS:
            break
    else:
        raise PhantomError(f"seed {seed}: could not place {MIN_LANDMARKS} landmarks inside the FOV")
    anchors = anchors[keep]
    sid = subject_id if subject_id is not None else f"s{seed:04d}"
    frames, landmarks = [], []
    for a in motion:
        frames.append((scene.render(a, (size, size)) * mask).astype(np.float32))
        landmarks.append(a.apply(anchors))
    return PhantomSubject(sid, frames, mask, landmarks, motion, scene)


@dataclass
class DatasetManifest:
    split: dict
    entries: list
    eval_pairs: list
    size: int
    n_frames: int

    def to_dict(self):
        return dict(split=self.split, entries=self.entries, eval_pairs=self.eval_pairs,
                    size=self.size, n_frames=self.n_frames, height=self.size, width=self.size)

    @classmethod
    def from_dict(cls, d):
        return cls(d["split"], d["entries"], d["eval_pairs"], d["size"], d["n_frames"])

    def images(self, role, split=None):
        ids = set(self.split[split]) if split else None
        return [e for e in self.entries if e["role"] == role and (ids is None or e["subject_id"] in ids)]


def split_counts(n, ratios):
    """Largest-remainder allocation of ``n`` subjects, each split non-empty."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if n < len(ratios):
        raise PhantomError(f"need at least {len(ratios)} subjects for a three-way split, got {n}")
    raw = n * ratios / ratios.sum()
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    while (counts == 0).any():
        counts[np.argmax(counts)] -= 1
        counts[np.argmin(counts)] += 1
    return tuple(int(c) for c in counts)


def build_manifest(subjects, ratios, rng, n_eval_pairs=60, max_gap=20):
    if len(subjects) < 3:
        raise PhantomError("need at least 3 subjects")
    ids = [s.subject_id for s in subjects]
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_tr, n_va, _ = split_counts(len(ids), ratios)
    split = dict(train=sorted(order[:n_tr]), val=sorted(order[n_tr:n_tr + n_va]),
                 test=sorted(order[n_tr + n_va:]))
    entries = []
    for s in subjects:
        for k in range(len(s.frames)):
            path = f"img_{s.subject_id}_{k:03d}.f32"
            roles = ("stitch_eval",) if s.subject_id in split["test"] else ("sspgm_train", "curated")
            for role in roles:
                entries.append(dict(subject_id=s.subject_id, frame_index=k, file_path=path, role=role))
    n_frames = len(subjects[0].frames)
    eval_pairs = []
    test = split["test"]
    for k in range(n_eval_pairs):
        sid = test[k % len(test)]
        i = int(rng.integers(n_frames))
        lo, hi = max(0, i - max_gap + 1), min(n_frames - 1, i + max_gap - 1)
        cand = [j for j in range(lo, hi + 1) if j != i] or [i]
        j = int(cand[int(rng.integers(len(cand)))])
        eval_pairs.append(dict(pair_id=f"p{k:03d}", subject_id=sid, moving=i, fixed=j))
    return DatasetManifest(split, entries, eval_pairs, subjects[0].size, n_frames)


def make_eval_pairs(manifest, subjects, n_pairs=60):
    """Materialize the manifest's frame pairs with keypoints and ground truth."""
    if not manifest.split["test"]:
        raise PhantomError("test split is empty")
    by_id = {s.subject_id: s for s in subjects}
    if n_pairs > len(manifest.eval_pairs):
        raise PhantomError(f"manifest holds {len(manifest.eval_pairs)} eval pairs, {n_pairs} requested")
    out = []
    for p in manifest.eval_pairs[:n_pairs]:
        s = by_id[p["subject_id"]]
        i, j = p["moving"], p["fixed"]
        gt = geo.compose(s.motion_log[j], s.motion_log[i].inverse())
        out.append(dict(
            pair_id=p["pair_id"], subject_id=s.subject_id,
            moving=s.frames[i], fixed=s.frames[j],
            keypoints_moving=s.landmarks[i], keypoints_fixed=s.landmarks[j],
            gt_affine=gt, fov_mask=s.fov_mask,
        ))
    return out


def make_content_pairs(subjects, n_pairs, ranges, rng, min_shift=0.0, prefix="c"):
    """Pairs with a shared FOV and content moved by a sampled affine.

    The fixed image is the scene re-rendered under ``A . motion[i]``, i.e.
    exactly what a perfect patch-conditioned outpainter would produce.  With
    ``min_shift > 0`` the sampled translation is at least that many pixels.
    """
    out = []
    for k in range(n_pairs):
        s = subjects[int(rng.integers(len(subjects)))]
        i = int(rng.integers(len(s.frames)))
        center = geo.image_center(s.fov_mask.shape)
        for _ in range(1000):
            a = geo.sample_affine(ranges, rng, center)
            if math.hypot(a.params["tx"], a.params["ty"]) >= min_shift:
                break
        else:
            raise PhantomError(f"no affine with shift >= {min_shift} in range {ranges['t']}")
        fixed = s.render(geo.compose(a, s.motion_log[i]))
        out.append(dict(
            pair_id=f"{prefix}{k:03d}", subject_id=s.subject_id,
            moving=s.frames[i], fixed=fixed,
            keypoints_moving=s.landmarks[i], keypoints_fixed=a.apply(s.landmarks[i]),
            gt_affine=a, fov_mask=s.fov_mask,
        ))
    return out


def generate_cohort(n_subjects, n_frames, size, seed):
    """Subjects with seeds derived from one master seed."""
    seeds = np.random.SeedSequence(seed).generate_state(n_subjects)
    return [gen_subject(int(sd), n_frames, size, subject_id=f"s{k:02d}") for k, sd in enumerate(seeds)]


def save_dataset(root, subjects, manifest):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in subjects:
        for k, f in enumerate(s.frames):
            write_f32(root / f"img_{s.subject_id}_{k:03d}.f32", f)
        write_f32(root / f"fov_{s.subject_id}.f32", s.fov_mask.astype(np.float32))
        write_json(root / f"motion_{s.subject_id}.json", [a.to_dict() for a in s.motion_log])
    with open(root / "landmarks.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "frame", "idx", "x", "y"])
        for s in subjects:
            for k, pts in enumerate(s.landmarks):
                for idx, (x, y) in enumerate(pts):
                    w.writerow([s.subject_id, k, idx, repr(float(x)), repr(float(y))])
    doc = manifest.to_dict()
    doc["subjects"] = [s.subject_id for s in subjects]
    write_json(root / "manifest.json", doc)


def load_dataset(root):
    """Read a dataset directory back into subjects (without scenes) and its manifest."""
    root = Path(root)
    doc = read_json(root / "manifest.json")
    manifest = DatasetManifest.from_dict(doc)
    size, n_frames = manifest.size, manifest.n_frames
    lms = {}
    with open(root / "landmarks.csv") as fh:
        for row in csv.DictReader(fh):
            lms.setdefault((row["subject"], int(row["frame"])), []).append((float(row["x"]), float(row["y"])))
    subjects = []
    for sid in doc["subjects"]:
        frames = [read_f32(root / f"img_{sid}_{k:03d}.f32", (size, size)) for k in range(n_frames)]
        mask = read_f32(root / f"fov_{sid}.f32", (size, size)).astype(np.uint8)
        motion = [geo.AffineTransform.from_dict(d) for d in read_json(root / f"motion_{sid}.json")]
        landmarks = [np.array(lms[(sid, k)]) for k in range(n_frames)]
        subjects.append(PhantomSubject(sid, frames, mask, landmarks, motion))
    return subjects, manifest
