"""Sound-image corpora: manifests, scene-disjoint splits, preprocessing, synthetic data."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import dsp

REFERENCE_CLASSES = ("baby_cry", "dog", "rail_transport", "fireworks", "water_flowing")
# Per-class 1-s segment counts of the reference corpus (train / val / test).
REFERENCE_SPLIT_COUNTS = {"train": 9789, "val": 1115, "test": 1365}
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SegmentRef:
    scene_id: str
    class_label: str
    segment_index: int
    audio_path: str
    image_path: str

    @property
    def key(self) -> str:
        return f"{self.scene_id}_{self.segment_index:03d}"


@dataclass
class SceneRecord:
    scene_id: str
    class_label: str
    segments: list[dict] = field(default_factory=list)

    def refs(self) -> list[SegmentRef]:
        return [SegmentRef(self.scene_id, self.class_label, s["segment_index"], s["audio_path"], s["image_path"])
                for s in sorted(self.segments, key=lambda s: s["segment_index"])]

    def to_json(self) -> str:
        return json.dumps({"scene_id": self.scene_id, "class_label": self.class_label,
                           "segments": sorted(self.segments, key=lambda s: s["segment_index"])},
                          sort_keys=True, ensure_ascii=False)


@dataclass
class SplitManifest:
    name: str
    segments: list[SegmentRef]

    @property
    def scene_ids(self) -> set[str]:
        return {s.scene_id for s in self.segments}

    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for s in self.segments:
            counts[s.class_label] = counts.get(s.class_label, 0) + 1
        return dict(sorted(counts.items()))

    def __len__(self):
        return len(self.segments)


def write_manifest(path, scenes: list[SceneRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in sorted(scenes, key=lambda s: s.scene_id):
            fh.write(scene.to_json() + "\n")


def read_manifest(path) -> list[SceneRecord]:
    scenes, seen = [], set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["scene_id"] in seen:
            raise ValueError(f"duplicate scene_id {rec['scene_id']!r} in {path}")
        seen.add(rec["scene_id"])
        for seg in rec["segments"]:
            if not seg.get("audio_path") or not seg.get("image_path"):
                raise ValueError(f"scene {rec['scene_id']}: segment {seg.get('segment_index')} lacks a modality")
        scenes.append(SceneRecord(rec["scene_id"], rec["class_label"], rec["segments"]))
    return sorted(scenes, key=lambda s: s.scene_id)


def write_split(path, split: SplitManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ref in split.segments:
            fh.write(json.dumps(asdict(ref), sort_keys=True) + "\n")


def read_split(path, name: str | None = None) -> SplitManifest:
    refs = [SegmentRef(**json.loads(line)) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    return SplitManifest(name or Path(path).stem, refs)


# -- splitting and balancing -------------------------------------------------


def balance_classes(per_class: dict[str, list], seed: int = 0) -> dict[str, list]:
    """Truncate every class to the smallest class size with a seeded uniform subset.

    Kept items stay in their original order.
    """
    if not per_class:
        raise ValueError("no classes to balance")
    empty = [label for label, items in per_class.items() if not items]
    if empty:
        raise ValueError(f"empty classes: {empty}")
    n = min(len(items) for items in per_class.values())
    out = {}
    for i, label in enumerate(sorted(per_class)):
        items = per_class[label]
        if len(items) == n:
            out[label] = list(items)
            continue
        rng = np.random.default_rng([seed, i])
        keep = np.sort(rng.choice(len(items), size=n, replace=False))
        out[label] = [items[j] for j in keep]
    return out


def _scene_quota(n_scenes: int, ratios) -> list[int]:
    quota = [int(round(r * n_scenes)) for r in ratios]
    for i, r in enumerate(ratios):
        if r > 0 and quota[i] == 0:
            quota[i] = 1
    # the first split absorbs rounding
    quota[0] = n_scenes - sum(quota[1:])
    return quota


def build_splits(scenes: list[SceneRecord], ratios=(0.6, 0.2, 0.2), seed: int = 0,
                 targets: dict[str, int] | None = None, names=SPLITS) -> dict[str, SplitManifest]:
    """Assign whole scenes to splits, then class-balance each split.

    Scenes are shuffled per class under ``seed`` and apportioned by
    ``ratios``; every segment of a scene lands in the same split.  Within each
    split every class is truncated to the same segment count, or to
    ``targets[split]`` when given.
    """
    if len(ratios) != len(names):
        raise ValueError(f"need {len(names)} ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    by_class: dict[str, list[SceneRecord]] = {}
    ids = set()
    for scene in scenes:
        if scene.scene_id in ids:
            raise ValueError(f"duplicate scene_id {scene.scene_id!r}")
        ids.add(scene.scene_id)
        by_class.setdefault(scene.class_label, []).append(scene)
    needed = sum(1 for r in ratios if r > 0)
    deficits = {c: needed - len(s) for c, s in sorted(by_class.items()) if len(s) < needed}
    if deficits:
        raise ValueError("insufficient scenes per class: " +
                         ", ".join(f"{c} short by {d}" for c, d in deficits.items()))

    per_split: dict[str, dict[str, list[SegmentRef]]] = {n: {} for n in names}
    for ci, label in enumerate(sorted(by_class)):
        group = sorted(by_class[label], key=lambda s: s.scene_id)
        order = np.random.default_rng([seed, ci]).permutation(len(group))
        quota = _scene_quota(len(group), ratios)
        pos = 0
        for name, q in zip(names, quota):
            chosen = [group[j] for j in order[pos:pos + q]]
            pos += q
            per_split[name][label] = [ref for sc in sorted(chosen, key=lambda s: s.scene_id) for ref in sc.refs()]

    out = {}
    for si, name in enumerate(names):
        classes = {c: refs for c, refs in per_split[name].items() if refs}
        if not classes:
            out[name] = SplitManifest(name, [])
            continue
        if len(classes) != len(by_class):
            missing = sorted(set(by_class) - set(classes))
            raise ValueError(f"split {name!r} has no segments for classes {missing}")
        balanced = balance_classes(classes, seed=seed * 31 + si)
        if targets and name in targets:
            want = targets[name]
            short = {c: want - len(v) for c, v in balanced.items() if len(v) < want}
            if short:
                raise ValueError(f"split {name!r} cannot reach {want} segments per class: "
                                 + ", ".join(f"{c} short by {d}" for c, d in short.items()))
            balanced = {c: _subset(v, want, [seed, si, ci]) for ci, (c, v) in enumerate(sorted(balanced.items()))}
        segs = sorted((r for refs in balanced.values() for r in refs), key=lambda r: (r.scene_id, r.segment_index))
        out[name] = SplitManifest(name, segs)
    return out


def _subset(items, n, seed):
    if len(items) == n:
        return list(items)
    keep = np.sort(np.random.default_rng(seed).choice(len(items), size=n, replace=False))
    return [items[j] for j in keep]


# -- images ------------------------------------------------------------------


def select_central_frame(frames):
    """Central frame of a segment; the upper median for even counts."""
    frames = list(frames)
    if not frames:
        raise ValueError("segment has no frames")
    return frames[len(frames) // 2]


def center_crop_box(height: int, width: int) -> tuple[int, int, int, int]:
    """(top, left, bottom, right), exclusive, of the central square crop."""
    side = min(height, width)
    top, left = (height - side) // 2, (width - side) // 2
    return top, left, top + side, left + side


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-centred sample positions, edge clamped."""
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape[:2]

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(out_h, in_h)
    x0, x1, wx = axis(out_w, in_w)
    wy = wy[:, None, None] if img.ndim == 3 else wy[:, None]
    wx = wx[None, :, None] if img.ndim == 3 else wx[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def center_crop_resize(image, size: int = 96) -> np.ndarray:
    """RGB ``(H, W, 3)`` uint8 -> ``(3, size, size)`` float32 in [-1, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an RGB image of shape (H, W, 3), got {img.shape}")
    if min(img.shape[:2]) < 1:
        raise ValueError("image has an empty dimension")
    top, left, bottom, right = center_crop_box(*img.shape[:2])
    crop = img[top:bottom, left:right].astype(np.float64)
    resized = crop if crop.shape[0] == size else bilinear_resize(crop, size, size)
    return (resized / 127.5 - 1.0).transpose(2, 0, 1).astype(np.float32)


def load_image(path, size: int = 96) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"{path}: expected RGB image, got mode {im.mode}")
        return center_crop_resize(np.asarray(im), size)


def image_to_uint8(tensor) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    arr = np.clip((np.asarray(tensor, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    return np.round(arr).astype(np.uint8).transpose(1, 2, 0)


def save_png(path, tensor) -> None:
    Image.fromarray(image_to_uint8(tensor), mode="RGB").save(path, format="PNG")


# -- synthetic corpus --------------------------------------------------------

_CLASS_COLORS = np.array([
    [220, 40, 40], [40, 70, 230], [40, 190, 60], [235, 210, 40], [200, 50, 200],
    [40, 200, 210], [240, 130, 30], [130, 80, 40],
], dtype=np.float64)
_SHAPES = ("disk", "square", "triangle", "cross", "ring", "bar", "diamond", "ellipse")


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 2
    scenes_per_class: int = 10
    segments_per_scene: int = 3
    noise_level: float = 0.1
    position_jitter: float = 0.08
    hue_jitter: float = 0.1
    seed: int = 0
    sample_rate: int = 8000
    image_width: int = 64
    image_height: int = 48

    def __post_init__(self):
        for name in ("n_classes", "scenes_per_class", "segments_per_scene"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_classes > len(_SHAPES):
            raise ValueError(f"at most {len(_SHAPES)} synthetic classes are available")

    @property
    def class_names(self) -> list[str]:
        if self.n_classes <= len(REFERENCE_CLASSES):
            return list(REFERENCE_CLASSES[:self.n_classes])
        return [f"class{k}" for k in range(self.n_classes)]


def class_fundamental(k: int, sample_rate: int, n_classes: int = 5) -> float:
    """Fundamental of class ``k``: log-spaced, keeping three harmonics below Nyquist."""
    top = sample_rate / 2 / 3.5
    return 180.0 * (top / 180.0) ** (k / max(4, n_classes - 1))


def class_am_rate(k: int) -> float:
    return 2.0 + 3.0 * k


def synth_audio(k: int, sample_rate: int, rng: np.random.Generator, detune: float = 1.0,
                noise_level: float = 0.0, phase: float = 0.0, n_classes: int = 5) -> np.ndarray:
    """Class-``k`` tone pattern: three harmonics, amplitude modulated, plus white noise."""
    t = np.arange(sample_rate) / sample_rate
    f0 = class_fundamental(k, sample_rate, n_classes) * detune
    tone = sum(np.sin(2 * np.pi * h * f0 * t + phase * h) / h for h in (1, 2, 3))
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * class_am_rate(k) * t + phase)
    signal = 0.3 * tone * envelope
    if noise_level:
        signal = signal + noise_level * rng.standard_normal(t.size)
    return np.clip(signal, -1.0, 1.0)


def _shape_mask(shape: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dy**2 + dx**2 <= r**2
    if shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if shape == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "cross":
        return ((np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r))
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "bar":
        return (np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r * 1.1)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    return (dy / (0.6 * r)) ** 2 + (dx / r) ** 2 <= 1


def synth_image(k: int, width: int, height: int, rng: np.random.Generator, center=(0.5, 0.5),
                hue: np.ndarray | None = None, texture_seed: int = 0) -> np.ndarray:
    """Class-``k`` coloured shape over a textured grey background, uint8 (H, W, 3)."""
    tex_rng = np.random.default_rng(texture_seed)
    coarse = tex_rng.uniform(70, 150, size=(6, 8, 1))
    bg = bilinear_resize(np.repeat(coarse, 3, axis=2), height, width)
    bg += rng.normal(0, 6, size=bg.shape)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    side = min(width, height)
    cy = center[0] * height
    cx = center[1] * width
    mask = _shape_mask(_SHAPES[k], yy, xx, cy, cx, 0.28 * side)
    color = _CLASS_COLORS[k] if hue is None else np.clip(_CLASS_COLORS[k] * hue, 0, 255)
    img = np.where(mask[..., None], color, bg)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def scene_seed(cfg: SynthConfig, k: int, j: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, k, j]).generate_state(1)[0])


def synth_dataset(cfg: SynthConfig, out_dir) -> list[SceneRecord]:
    """Render a paired corpus: WAV + PNG per segment and ``manifest.jsonl``.

    Segments of one scene share detuning, background texture and base shape
    position, so scene-level leakage between splits would be detectable.
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    scenes = []
    for k, label in enumerate(cfg.class_names):
        for j in range(cfg.scenes_per_class):
            sseed = scene_seed(cfg, k, j)
            rng = np.random.default_rng(sseed)
            scene_id = f"{label}-{sseed:010d}"
            detune = 1.0 + rng.uniform(-0.03, 0.03)
            base = 0.5 + rng.uniform(-cfg.position_jitter, cfg.position_jitter, size=2)
            hue = 1.0 + rng.uniform(-cfg.hue_jitter, cfg.hue_jitter, size=3)
            tex = int(rng.integers(2**31))
            segments = []
            for s in range(cfg.segments_per_scene):
                seg_rng = np.random.default_rng([sseed, s])
                audio = synth_audio(k, cfg.sample_rate, seg_rng, detune, cfg.noise_level,
                                    phase=seg_rng.uniform(0, 2 * np.pi), n_classes=cfg.n_classes)
                center = base + seg_rng.uniform(-0.03, 0.03, size=2)
                img = synth_image(k, cfg.image_width, cfg.image_height, seg_rng, tuple(center), hue, tex)
                stem = f"{scene_id}_{s:03d}"
                audio_rel, image_rel = f"audio/{stem}.wav", f"images/{stem}.png"
                dsp.write_wav(out / audio_rel, dsp.AudioSegment(audio, cfg.sample_rate))
                Image.fromarray(img, mode="RGB").save(out / image_rel, format="PNG")
                segments.append({"segment_index": s, "audio_path": audio_rel, "image_path": image_rel})
            scenes.append(SceneRecord(scene_id, label, segments))
    write_manifest(out / "manifest.jsonl", scenes)
    return sorted(scenes, key=lambda s: s.scene_id)


# -- featurization and loading ----------------------------------------------


def _featurize_one(args):
    root, ref, frontend = args
    seg = dsp.read_wav(Path(root) / ref.audio_path, expected_rate=frontend.sample_rate)
    return dsp.log_mel_spectrogram(seg, frontend).values


def featurize(root, refs: list[SegmentRef], frontend: dsp.FrontendConfig, jobs: int = 1) -> np.ndarray:
    """Unnormalized log-Mel spectrograms for ``refs``, shape (N, frames, mels)."""
    tasks = [(str(root), ref, frontend) for ref in refs]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            specs = list(pool.map(_featurize_one, tasks, chunksize=16))
    else:
        specs = [_featurize_one(t) for t in tasks]
    return np.stack(specs) if specs else np.zeros((0,) + frontend.shape)


def normalize_batch(specs: np.ndarray, stats: dsp.NormStats) -> np.ndarray:
    return np.stack([dsp.normalize_spectrogram(dsp.Spectrogram(s), stats).values for s in specs]).astype(np.float32)


def load_images(root, refs: list[SegmentRef], size: int) -> np.ndarray:
    return np.stack([load_image(Path(root) / r.image_path, size) for r in refs]).astype(np.float32)


@dataclass
class TripleSet:
    """Aligned spectrograms (normalized), images, labels and segment refs."""

    spectrograms: np.ndarray
    images: np.ndarray
    labels: np.ndarray
    refs: list[SegmentRef]
    class_names: list[str]

    def __len__(self):
        return len(self.refs)

    def subset(self, idx) -> "TripleSet":
        idx = np.asarray(idx)
        return TripleSet(self.spectrograms[idx], self.images[idx], self.labels[idx],
                         [self.refs[i] for i in idx], self.class_names)


def load_triples(root, split: SplitManifest, frontend: dsp.FrontendConfig, stats: dsp.NormStats,
                 image_size: int, class_names: list[str], jobs: int = 1) -> TripleSet:
    specs = normalize_batch(featurize(root, split.segments, frontend, jobs), stats)
    images = load_images(root, split.segments, image_size)
    labels = np.array([class_names.index(r.class_label) for r in split.segments], dtype=np.int64)
    return TripleSet(specs, images, labels, list(split.segments), list(class_names))
