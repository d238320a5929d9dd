"""Samples, manifests, augmentations and the synthetic video-word generator."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .ndtensor import Rng, ShapeError, load_tensor, save_tensor

SPLITS = ("train", "val", "test")
# ITU-R BT.601 luma
LUMA = (0.299, 0.587, 0.114)


class DataError(RuntimeError):
    """Missing or malformed dataset content."""


# ---------------------------------------------------------------- data model

@dataclass
class VideoSample:
    frames: np.ndarray      # (T, H, W) in [0, 1]
    label: int
    boundary: tuple[int, int]
    id: str

    @property
    def mask(self) -> np.ndarray:
        return boundary_mask(self.frames.shape[0], *self.boundary)


@dataclass
class ManifestEntry:
    path: str
    label: int
    start: int
    end: int
    split: str


@dataclass
class DatasetManifest:
    classes: list[str]
    samples: list[ManifestEntry] = field(default_factory=list)

    def validate(self) -> None:
        n = len(self.classes)
        for s in self.samples:
            if not 0 <= s.label < n:
                raise DataError(f"{s.path}: label {s.label} outside {n} classes")
            if not 0 <= s.start < s.end:
                raise DataError(f"{s.path}: boundary [{s.start}, {s.end}) is empty or negative")
            if s.split not in SPLITS:
                raise DataError(f"{s.path}: unknown split {s.split!r}")

    def split(self, name: str) -> list[ManifestEntry]:
        return [s for s in self.samples if s.split == name]

    def to_json(self) -> str:
        doc = {"classes": self.classes, "samples": [asdict(s) for s in self.samples]}
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            doc = json.loads(text)
            m = cls(classes=list(doc["classes"]), samples=[ManifestEntry(**s) for s in doc["samples"]])
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise DataError(f"malformed manifest: {e}") from e
        m.validate()
        return m

    def save(self, data_dir: str | Path) -> None:
        (Path(data_dir) / "manifest.json").write_text(self.to_json())

    @classmethod
    def load(cls, data_dir: str | Path) -> "DatasetManifest":
        path = Path(data_dir) / "manifest.json"
        if not path.exists():
            raise DataError(f"no manifest.json in {data_dir}")
        return cls.from_json(path.read_text())


def boundary_mask(T: int, start: int, end: int) -> np.ndarray:
    m = np.zeros(T, dtype=np.float32)
    m[max(start, 0):max(min(end, T), 0)] = 1.0
    return m


# ---------------------------------------------------------------- frame ops

def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """(3, H, W) or (T, 3, H, W) RGB in [0, 1] to luma."""
    rgb = np.asarray(rgb)
    if rgb.ndim < 3 or rgb.shape[-3] != 3:
        raise ShapeError(f"expected 3 colour channels, got shape {rgb.shape}")
    r, g, b = np.moveaxis(rgb, -3, 0)
    return (LUMA[0] * r + LUMA[1] * g + LUMA[2] * b).astype(rgb.dtype)


def resize_bilinear(frames: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of the last two axes."""
    th, tw = (size, size) if isinstance(size, int) else size
    frames = np.asarray(frames)
    sh, sw = frames.shape[-2:]
    if sh < 2 or sw < 2:
        raise ShapeError(f"cannot resize a degenerate {sh}x{sw} source")
    if (sh, sw) == (th, tw):
        return frames.copy()

    def axis_weights(src: int, dst: int):
        pos = np.linspace(0.0, src - 1, dst) if dst > 1 else np.array([(src - 1) / 2.0])
        i0 = np.clip(np.floor(pos).astype(int), 0, src - 2)
        frac = pos - i0
        return i0, frac

    r0, fr = axis_weights(sh, th)
    c0, fc = axis_weights(sw, tw)
    top = frames[..., r0, :] * (1 - fr)[:, None] + frames[..., r0 + 1, :] * fr[:, None]
    out = top[..., c0] * (1 - fc) + top[..., c0 + 1] * fc
    return out.astype(frames.dtype)


def crop(video: np.ndarray, size: int, mode: str = "center", rng: Rng | None = None) -> tuple[np.ndarray, tuple[int, int]]:
    """One ``size`` x ``size`` window shared by every frame; returns (clip, (top, left))."""
    H, W = video.shape[-2:]
    if H < size or W < size:
        raise ShapeError(f"cannot crop {size}x{size} from {H}x{W}")
    if mode == "center":
        top, left = (H - size) // 2, (W - size) // 2
    elif mode == "random":
        if rng is None:
            raise ValueError("random crop needs an rng")
        top = int(rng.integers(0, H - size + 1))
        left = int(rng.integers(0, W - size + 1))
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    return video[..., top:top + size, left:left + size], (top, left)


def hflip(video: np.ndarray, p: float = 0.5, rng: Rng | None = None) -> tuple[np.ndarray, bool]:
    """Mirror the whole clip left-right with probability ``p`` (one draw per clip)."""
    if p <= 0.0:
        return video, False
    if rng is None:
        raise ValueError("hflip with p > 0 needs an rng")
    if rng.random() < p:
        return video[..., ::-1], True
    return video, False


def center_window(frames: np.ndarray, boundary: tuple[int, int], target: int = 40):
    """Fixed-length window centred on the word; out-of-range frames replicate the edge frame.

    Returns the windowed frames and the re-indexed boundary interval.
    """
    start, end = boundary
    if end <= start:
        raise ValueError(f"empty word boundary [{start}, {end})")
    T = frames.shape[0]
    c = (start + end) // 2
    half = target // 2
    src = np.clip(np.arange(c - half, c - half + target), 0, T - 1)
    inside = (src >= start) & (src < end)
    idx = np.flatnonzero(inside)
    new_b = (int(idx[0]), int(idx[-1]) + 1) if idx.size else (0, 0)
    return frames[src], new_b


def epoch_shuffle(n: int, rng: Rng) -> np.ndarray:
    return rng.permutation(n)


# ---------------------------------------------------------------- pipeline

@dataclass
class DataConfig:
    resize: int = 96
    crop: int = 88
    hflip_p: float = 0.5
    window_frames: int = 0        # 40 reproduces the word-centred window; 0 keeps clips as stored
    align: bool = False
    train_limit: int = 0          # use only the first N training samples (0 = all)
    eval_train: bool = False      # also log clean eval-mode accuracy on the training split

    def validate(self) -> None:
        if self.crop < 1 or self.resize < self.crop:
            raise ValueError("data.crop must be >= 1 and data.resize >= data.crop")
        if not 0.0 <= self.hflip_p <= 1.0:
            raise ValueError("data.hflip_p must be in [0, 1]")
        if self.window_frames < 0 or self.train_limit < 0:
            raise ValueError("data.window_frames and data.train_limit must be >= 0")


@dataclass
class Batch:
    x: np.ndarray           # (B, 1, T, H, W)
    labels: np.ndarray      # (B,)
    boundary: np.ndarray    # (B, T)
    ids: list[str]


def load_samples(data_dir: str | Path, manifest: DatasetManifest, split: str, cfg: DataConfig) -> list[VideoSample]:
    """Load and deterministically prepare (align, window, resize) every clip of a split."""
    data_dir = Path(data_dir)
    entries = manifest.split(split)
    if split == "train" and cfg.train_limit:
        entries = entries[: cfg.train_limit]
    template = None
    if cfg.align:
        from .align import load_template

        template = load_template(data_dir / "template.json")
    out = []
    for e in entries:
        path = data_dir / e.path
        try:
            frames = load_tensor(path)
        except (OSError, ValueError) as err:
            raise DataError(f"cannot read clip {path}: {err}") from err
        if frames.ndim == 4:
            frames = to_grayscale(frames)
        if frames.ndim != 3:
            raise DataError(f"{path}: expected (T, H, W) frames, got {frames.shape}")
        sid = Path(e.path).stem
        if template is not None:
            from .align import align_clip, load_landmarks

            lm = load_landmarks(data_dir / "landmarks" / f"{sid}.json")
            frames = align_clip(frames, lm, template)
        boundary = (e.start, e.end)
        if cfg.window_frames:
            frames, boundary = center_window(frames, boundary, cfg.window_frames)
        if frames.shape[-2:] != (cfg.resize, cfg.resize):
            frames = resize_bilinear(frames, cfg.resize)
        out.append(VideoSample(np.clip(frames, 0.0, 1.0).astype(np.float32), e.label, boundary, sid))
    return out


def augment(sample: VideoSample, cfg: DataConfig, rng: Rng | None, train: bool) -> np.ndarray:
    if train:
        clip, _ = crop(sample.frames, cfg.crop, "random", rng)
        clip, _ = hflip(clip, cfg.hflip_p, rng)
    else:
        clip, _ = crop(sample.frames, cfg.crop, "center")
    return clip


def collate(samples: Sequence[VideoSample], clips: Sequence[np.ndarray]) -> Batch:
    lengths = {c.shape[0] for c in clips}
    if len(lengths) != 1:
        raise DataError(f"clips in a batch must share a length, got {sorted(lengths)}")
    x = np.stack(clips)[:, None].astype(np.float32)
    return Batch(
        x=np.ascontiguousarray(x),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        boundary=np.stack([s.mask for s in samples]),
        ids=[s.id for s in samples],
    )


def iterate_batches(samples: Sequence[VideoSample], batch: int, cfg: DataConfig,
                    rng: Rng | None = None, train: bool = False) -> Iterator[Batch]:
    """Train mode shuffles and augments with per-sample sub-streams of ``rng``."""
    n = len(samples)
    if n == 0:
        raise DataError("empty split")
    order = epoch_shuffle(n, rng.child(0)) if train else np.arange(n)
    for s in range(0, n, batch):
        idx = order[s:s + batch]
        chosen = [samples[i] for i in idx]
        clips = [augment(samples[i], cfg, rng.child(1, int(s + k)) if train else None, train)
                 for k, i in enumerate(idx)]
        yield collate(chosen, clips)


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    classes: int = 10
    per_class: int = 140
    frames: int = 20
    size: int = 96
    noise: float = 0.05
    boundary_context: bool = False
    jitter: bool = False
    seed: int = 0
    f_lo: float = 0.06
    f_hi: float = 0.42
    word_frac: tuple[float, float] = (0.4, 0.6)

    @property
    def frequencies(self) -> np.ndarray:
        return np.linspace(self.f_lo, self.f_hi, self.classes)

    @property
    def phases(self) -> np.ndarray:
        golden = (math.sqrt(5) - 1) / 2
        return 2 * math.pi * ((np.arange(self.classes) * golden) % 1.0)

    @property
    def separation(self) -> float:
        return (self.f_hi - self.f_lo) / max(self.classes - 1, 1)


# canonical face layout in units of the image size
_LEFT_EYE = (0.33, 0.36)
_RIGHT_EYE = (0.67, 0.36)
_NOSE = (0.50, 0.50)
_MOUTH = (0.50, 0.68)
_MOUTH_HALF_WIDTH = 0.17


def canonical_landmarks(size: int) -> np.ndarray:
    """Five points (eyes, nose, mouth corners) in pixel units for a ``size`` image."""
    mx, my = _MOUTH
    pts = [_LEFT_EYE, _RIGHT_EYE, _NOSE, (mx - _MOUTH_HALF_WIDTH, my), (mx + _MOUTH_HALF_WIDTH, my)]
    return np.array(pts) * (size - 1)


def _opening(t: np.ndarray, freq: float, phase: float) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * math.pi * freq * t + phase)


def _render(spec: SyntheticSpec, openings: np.ndarray, brightness: float, shift: np.ndarray,
            xforms: np.ndarray, rng: Rng) -> np.ndarray:
    """Render one clip; ``xforms`` holds per-frame (scale, angle, tx, ty) about the image centre."""
    S = spec.size
    T = len(openings)
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    c = (S - 1) / 2.0
    frames = np.empty((T, S, S), dtype=np.float64)
    mouth = np.array(_MOUTH) * (S - 1)
    eyes = [np.array(_LEFT_EYE) * (S - 1), np.array(_RIGHT_EYE) * (S - 1)]
    a = _MOUTH_HALF_WIDTH * (S - 1)
    for t in range(T):
        s, th, tx, ty = xforms[t]
        # image -> canonical coordinates
        dx = xx - c - tx - shift[0]
        dy = yy - c - ty - shift[1]
        ct, st = math.cos(th), math.sin(th)
        u = (ct * dx + st * dy) / s + c
        v = (-st * dx + ct * dy) / s + c
        img = np.full((S, S), 0.62 + brightness)
        b = (0.02 + 0.12 * openings[t]) * (S - 1)
        r = np.sqrt(((u - mouth[0]) / a) ** 2 + ((v - mouth[1]) / b) ** 2)
        img -= 0.42 * np.clip(0.5 - (r - 1.0) * b, 0.0, 1.0)
        for e in eyes:
            d = np.hypot(u - e[0], v - e[1]) - 0.05 * (S - 1)
            img -= 0.3 * np.clip(0.5 - d, 0.0, 1.0)
        frames[t] = img
    frames += spec.noise * rng.normal(frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def _jitter_track(spec: SyntheticSpec, rng: Rng) -> np.ndarray:
    T = spec.frames
    xf = np.zeros((T, 4))
    xf[:, 0] = 1.0
    if spec.jitter:
        base = (rng.random() * 2 - 1) * math.radians(12)
        walk = np.cumsum(rng.normal(T) * math.radians(3))
        xf[:, 0] = 1.0 + 0.06 * (rng.random(T) * 2 - 1)
        xf[:, 1] = base + walk
        xf[:, 2:] = (rng.random((T, 2)) * 2 - 1) * 0.03 * spec.size
    return xf


def _landmarks(spec: SyntheticSpec, shift: np.ndarray, xforms: np.ndarray) -> np.ndarray:
    S = spec.size
    c = (S - 1) / 2.0
    base = canonical_landmarks(S) - c
    out = []
    for s, th, tx, ty in xforms:
        R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        out.append(s * base @ R.T + c + np.array([tx, ty]) + shift)
    return np.array(out)


def generate_synthetic(out_dir: str | Path, spec: SyntheticSpec) -> DatasetManifest:
    """Write a deterministic synthetic dataset and return its manifest.

    Each clip shows a face whose mouth opening oscillates with the class's
    frequency and phase inside the word interval. Outside the interval the
    mouth rests, or (``boundary_context``) speaks a distractor word from
    another class, so only the boundary says which oscillation is the target.
    """
    K, n, T = spec.classes, spec.per_class, spec.frames
    if K < 2 or n < 2 or T < 8:
        raise ValueError("synthetic data needs classes >= 2, per_class >= 2, frames >= 8")
    if spec.f_hi >= 0.5:
        raise ValueError("class frequencies must stay below the Nyquist limit 0.5")
    out = Path(out_dir)
    try:
        (out / "clips").mkdir(parents=True, exist_ok=True)
        (out / "landmarks").mkdir(exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directory {out}: {e}") from e
    rng = Rng(spec.seed, 17)
    freqs, phases = spec.frequencies, spec.phases
    t_axis = np.arange(T, dtype=np.float64)
    manifest = DatasetManifest(classes=[f"word{k:03d}" for k in range(K)])
    n_train = round(0.7 * n)
    n_val = round(0.15 * n)
    for k in range(K):
        splits = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
        order = rng.permutation(n)
        for j in range(n):
            srng = rng.child(k, j)
            L = int(round(T * (spec.word_frac[0] + (spec.word_frac[1] - spec.word_frac[0]) * srng.random())))
            L = min(max(L, 2), T - 2)
            start = int(srng.integers(1, T - L))
            end = start + L
            open_ = np.full(T, 0.08)
            open_[start:end] = _opening(t_axis[start:end] - start, freqs[k], phases[k])
            if spec.boundary_context:
                d = int(srng.integers(0, K - 1))
                d += d >= k
                lead = srng.random() * 4.0
                outside = np.r_[0:start, end:T]
                open_[outside] = _opening(t_axis[outside] + lead, freqs[d], phases[d])
            open_ = np.clip(open_ * (0.85 + 0.3 * srng.random()), 0.0, 1.0)
            brightness = (srng.random() * 2 - 1) * 0.1
            shift = (srng.random(2) * 2 - 1) * 0.04 * spec.size
            xforms = _jitter_track(spec, srng)
            frames = _render(spec, open_, brightness, shift, xforms, srng)
            sid = f"{manifest.classes[k]}_{j:04d}"
            save_tensor(out / "clips" / f"{sid}.lkt", frames)
            lm = _landmarks(spec, shift, xforms)
            (out / "landmarks" / f"{sid}.json").write_text(json.dumps(np.round(lm, 4).tolist()))
            manifest.samples.append(ManifestEntry(f"clips/{sid}.lkt", k, start, end, splits[order[j]]))
    manifest.save(out)
    from .align import default_template

    (out / "template.json").write_text(json.dumps(default_template(spec.size), indent=1))
    meta = asdict(spec)
    meta["frequencies"] = spec.frequencies.round(6).tolist()
    (out / "generator.json").write_text(json.dumps(meta, indent=1))
    return manifest


def nearest_centroid_single_frame(train: Sequence[VideoSample], test: Sequence[VideoSample], K: int) -> float:
    """Accuracy of a nearest-centroid classifier that sees only each clip's middle frame."""
    def feats(samples):
        return np.stack([s.frames[s.frames.shape[0] // 2].ravel() for s in samples]).astype(np.float64)

    xtr, ytr = feats(train), np.array([s.label for s in train])
    cents = np.stack([xtr[ytr == k].mean(axis=0) for k in range(K)])
    xte, yte = feats(test), np.array([s.label for s in test])
    d = ((xte[:, None, :] - cents[None]) ** 2).sum(axis=-1)
    return float((d.argmin(axis=1) == yte).mean())
