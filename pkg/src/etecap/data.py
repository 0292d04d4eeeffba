"""Dataset ingestion plus a deterministic synthetic clip-caption generator.

Manifest JSONL fields per clip: {id, feature_path | frame_dir, captions:[...],
split}.  Frames are PNG files named frame_0000.png ... inside frame_dir;
feature files use the encoder module's ETEF format.

The synthetic task renders one clip per (shape, color, motion) combination:
a colored shape starts at the frame center and translates outward in the
motion direction.  Starting at the center keeps the frame SETS of opposite
motions distinct; soft-attention is order-invariant over feature rows, so
motions that merely reversed the same frames would be indistinguishable.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .encoder import read_features
from .errors import IngestionError
from .text import tokenize

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue")
MOTIONS = ("left", "right", "up", "down")
_RGB = {"red": (1.0, 0.1, 0.1), "green": (0.1, 1.0, 0.1), "blue": (0.1, 0.1, 1.0)}
_SUPERSAMPLE = 4


def sample_frames(total, n):
    """Equally spaced indices: round(i*(T-1)/(n-1)), half-up, endpoints kept."""
    if total < 1:
        raise IngestionError(f"cannot sample from {total} frames")
    if n < 1:
        raise IngestionError(f"cannot sample {n} frames")
    if n == 1:
        return [(total - 1) // 2]
    return [int(np.floor(i * (total - 1) / (n - 1) + 0.5)) for i in range(n)]


@dataclass
class CaptionedClip:
    id: str
    captions: list
    tokens: list = field(default_factory=list)   # tokenized captions
    feature_path: str | None = None
    frame_dir: str | None = None
    split: str = "train"

    _features: np.ndarray | None = None
    _frames: list | None = None

    def load_features(self):
        if self._features is None:
            self._features = read_features(self.feature_path)
        return self._features

    def load_frames(self):
        if self._frames is None:
            from PIL import Image
            names = sorted(f for f in os.listdir(self.frame_dir) if f.endswith(".png"))
            self._frames = [
                np.asarray(Image.open(os.path.join(self.frame_dir, name))).astype(float) / 255.0
                for name in names
            ]
        return self._frames


@dataclass
class SynthSpec:
    image_size: int = 32
    num_frames: int = 16
    seed: int = 0
    split_sizes: tuple = (28, 4, 4)      # latent combinations per split
    clips_per_combo: int = 1             # jittered instances per combination
    trail: float = 0.7                   # per-frame decay of the motion trail
    trail_cap: float = 0.25              # trail peak intensity vs the shape

    def combos(self):
        return [(s, c, m) for s in SHAPES for c in COLORS for m in MOTIONS]


def _shape_mask(shape, cx, cy, radius, size):
    """Fractional pixel coverage on a supersampled grid."""
    ss = _SUPERSAMPLE
    coords = (np.arange(size * ss) + 0.5) / ss
    xs = coords[None, :].repeat(size * ss, axis=0)
    ys = coords[:, None].repeat(size * ss, axis=1)
    if shape == "square":
        inside = (np.abs(xs - cx) <= radius) & (np.abs(ys - cy) <= radius)
    elif shape == "circle":
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2
    else:  # triangle pointing up
        dy = ys - (cy - radius)
        inside = (dy >= 0) & (dy <= 2 * radius) & (np.abs(xs - cx) <= dy / 2)
    blocks = inside.reshape(size, ss, size, ss)
    return blocks.mean(axis=(1, 3))


def render_clip(shape, color, motion, image_size=32, num_frames=16, jitter=None,
                trail=0.7, trail_cap=0.25):
    """Frames of a colored shape moving from the center toward one edge.

    Each frame shows the shape at its current position plus a fading trail
    of its earlier positions (a motion-blur stand-in), so single frames
    expose the motion direction the way real video frames do; the trail
    peaks at ``trail_cap`` of the shape intensity so the leading silhouette
    stays crisp.  ``jitter`` (an (sx, sy, travel_frac, radius_frac) tuple,
    all in frame fractions) varies the start point, speed and size between
    instances of the same combination.  The rendered mass centroid stays
    strictly monotone along the motion axis: the trail also advances frame
    over frame.
    """
    sx, sy, travel_frac, radius_frac = jitter or (0.0, 0.0, 0.30, 0.14)
    start_x = image_size * (0.5 + sx)
    start_y = image_size * (0.5 + sy)
    travel = image_size * travel_frac
    radius = image_size * radius_frac
    masks = []
    for t in range(num_frames):
        frac = t / (num_frames - 1) if num_frames > 1 else 0.0
        cx, cy = start_x, start_y
        if motion == "left":
            cx = start_x - frac * travel
        elif motion == "right":
            cx = start_x + frac * travel
        elif motion == "up":
            cy = start_y - frac * travel
        else:
            cy = start_y + frac * travel
        masks.append(_shape_mask(shape, cx, cy, radius, image_size))
    frames = []
    for t in range(num_frames):
        composite = masks[t]
        if trail > 0:
            for s in range(t):
                wake = masks[s] * (trail_cap * trail ** (t - s))
                composite = np.maximum(composite, wake)
        frame = np.zeros((image_size, image_size, 3))
        for ch, val in enumerate(_RGB[color]):
            frame[:, :, ch] = composite * val
        frames.append(frame)
    return frames


def _instance_jitter(rng):
    # start offset + travel + radius can reach ~0.51 of the frame: the shape
    # may clip slightly at the border in the last frames, which keeps the
    # centroid strictly monotone while maximizing the motion signal
    return (
        float(rng.uniform(-0.02, 0.02)),
        float(rng.uniform(-0.02, 0.02)),
        float(rng.uniform(0.22, 0.28)),
        float(rng.uniform(0.16, 0.21)),
    )


def _choose_holdout(combos, order, n_holdout):
    """Pick holdout combinations while keeping every factor pair in training.

    Greedy over the shuffled order: a combination is held out only if each
    of its (color, shape), (color, motion) and (shape, motion) pairs still
    occurs in at least one remaining training combination.
    """
    pair_counts = {}
    def pairs_of(combo):
        shape, color, motion = combo
        return ((color, shape), (color, motion), (shape, motion))

    for combo in combos:
        for pair in pairs_of(combo):
            pair_counts[pair] = pair_counts.get(pair, 0) + 1

    holdout = []
    for idx in order:
        if len(holdout) == n_holdout:
            break
        pairs = pairs_of(combos[idx])
        if all(pair_counts[p] >= 2 for p in pairs):
            holdout.append(idx)
            for p in pairs:
                pair_counts[p] -= 1
    if len(holdout) < n_holdout:   # fall back to the plain shuffled prefix
        for idx in order:
            if idx not in holdout:
                holdout.append(idx)
                if len(holdout) == n_holdout:
                    break
    return holdout


def caption_for(shape, color, motion):
    return f"a {color} {shape} moves {motion}"


def generate_synthetic(spec, out_dir):
    """Render all combos, write PNG frames and the split manifest.

    Deterministic: the same spec always produces byte-identical files.
    Returns the manifest path.
    """
    combos = spec.combos()
    rng = np.random.default_rng(spec.seed)
    order = list(rng.permutation(len(combos)))
    n_train, n_val, n_test = spec.split_sizes
    if n_train + n_val + n_test > len(combos):
        raise IngestionError(
            f"split sizes {spec.split_sizes} exceed {len(combos)} combinations")
    holdout = _choose_holdout(combos, order, n_val + n_test)
    split_of = {idx: "val" for idx in holdout[:n_val]}
    split_of.update({idx: "test" for idx in holdout[n_val:]})
    remaining = [idx for idx in order if idx not in split_of]
    for idx in remaining[:n_train]:
        split_of[idx] = "train"

    from PIL import Image
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for idx, (shape, color, motion) in enumerate(combos):
        if idx not in split_of:
            continue
        for inst in range(spec.clips_per_combo):
            clip_id = f"{color}-{shape}-{motion}"
            jitter = None
            if spec.clips_per_combo > 1:
                clip_id = f"{clip_id}-{inst:02d}"
                inst_rng = np.random.default_rng([spec.seed, idx, inst])
                jitter = _instance_jitter(inst_rng)
            frame_dir = os.path.join(out_dir, "frames", clip_id)
            os.makedirs(frame_dir, exist_ok=True)
            frames = render_clip(shape, color, motion,
                                 spec.image_size, spec.num_frames, jitter=jitter,
                                 trail=spec.trail, trail_cap=spec.trail_cap)
            for t, frame in enumerate(frames):
                img = Image.fromarray(
                    np.clip(frame * 255.0 + 0.5, 0, 255).astype(np.uint8))
                img.save(os.path.join(frame_dir, f"frame_{t:04d}.png"))
            records.append({
                "id": clip_id,
                "frame_dir": os.path.relpath(frame_dir, out_dir),
                "captions": [caption_for(shape, color, motion)],
                "split": split_of[idx],
            })

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest_path


def load_manifest(path, expected_frames=None, expected_dim=None):
    """Parse and validate a manifest; errors are aggregated with clip ids."""
    root = os.path.dirname(os.path.abspath(path))
    clips, problems = [], []
    try:
        lines = open(path, encoding="utf-8").read().splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {path}: {exc}") from exc

    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            problems.append(f"line {lineno}: invalid JSON")
            continue
        cid = rec.get("id", f"line-{lineno}")
        captions = rec.get("captions") or []
        if not captions:
            problems.append(f"{cid}: no captions")
            continue
        clip = CaptionedClip(
            id=cid,
            captions=list(captions),
            tokens=[tokenize(c) for c in captions],
            split=rec.get("split", "train"),
        )
        if "feature_path" in rec:
            clip.feature_path = os.path.join(root, rec["feature_path"])
            try:
                feats = clip.load_features()
            except IngestionError as exc:
                problems.append(f"{cid}: {exc}")
                continue
            if expected_frames is not None and feats.shape[0] != expected_frames:
                problems.append(
                    f"{cid}: {feats.shape[0]} feature rows, expected {expected_frames}")
                continue
            if expected_dim is not None and feats.shape[1] != expected_dim:
                problems.append(
                    f"{cid}: feature dim {feats.shape[1]}, expected {expected_dim}")
                continue
        elif "frame_dir" in rec:
            clip.frame_dir = os.path.join(root, rec["frame_dir"])
            if not os.path.isdir(clip.frame_dir):
                problems.append(f"{cid}: missing frame_dir {rec['frame_dir']}")
                continue
        else:
            problems.append(f"{cid}: neither feature_path nor frame_dir")
            continue
        clips.append(clip)

    if problems:
        raise IngestionError("manifest errors: " + "; ".join(problems))
    return clips


def split_clips(clips):
    out = {"train": [], "val": [], "test": []}
    for clip in clips:
        out.setdefault(clip.split, []).append(clip)
    return out
