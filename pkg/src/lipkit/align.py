"""Procrustes face alignment, inverse-mapped warping and fixed-square lip crops."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .ndtensor import ShapeError


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> s R(theta) x + t."""
    s: float = 1.0
    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.s > 0 or not math.isfinite(self.s):
            raise AlignmentError(f"similarity scale must be positive, got {self.s}")

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    @property
    def linear(self) -> np.ndarray:
        return self.s * self.rotation

    @property
    def t(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.linear.T + self.t


@dataclass(frozen=True)
class AffineTransform:
    A: np.ndarray
    b: np.ndarray

    @property
    def linear(self) -> np.ndarray:
        return self.A

    @property
    def t(self) -> np.ndarray:
        return self.b

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.A.T + self.b


def _points(p, name: str) -> np.ndarray:
    a = np.asarray(p, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ShapeError(f"{name} must be an (L, 2) point list, got shape {a.shape}")
    if a.shape[0] < 2:
        raise AlignmentError(f"{name} needs at least 2 landmarks")
    if not np.all(np.isfinite(a)):
        raise AlignmentError(f"{name} contains non-finite coordinates")
    return a


def procrustes_fit(src, canonical) -> SimilarityTransform:
    """Least-squares similarity mapping ``src`` onto ``canonical``."""
    x = _points(src, "src")
    y = _points(canonical, "canonical")
    if x.shape != y.shape:
        raise AlignmentError(f"landmark count mismatch: {len(x)} vs {len(y)}")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    var = float((xc * xc).sum())
    if var <= 1e-12 * max(1.0, float(np.abs(x).max()) ** 2):
        raise AlignmentError("degenerate source landmarks (all points coincide)")
    dot = float((xc * yc).sum())
    cross = float((xc[:, 0] * yc[:, 1] - xc[:, 1] * yc[:, 0]).sum())
    theta = math.atan2(cross, dot)
    s = math.hypot(dot, cross) / var
    if s <= 0:
        raise AlignmentError("landmark sets have no correlated structure")
    R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    t = my - s * R @ mx
    return SimilarityTransform(s, theta, float(t[0]), float(t[1]))


def affine_fit(src, canonical) -> AffineTransform:
    """Unconstrained least-squares affine fit (alternative to the similarity default)."""
    x = _points(src, "src")
    y = _points(canonical, "canonical")
    if x.shape != y.shape:
        raise AlignmentError(f"landmark count mismatch: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise AlignmentError("an affine fit needs at least 3 landmarks")
    X = np.hstack([x, np.ones((len(x), 1))])
    sol, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < 3:
        raise AlignmentError("degenerate source landmarks for an affine fit")
    return AffineTransform(A=sol[:2].T.copy(), b=sol[2].copy())


def residual(xf, src, canonical) -> float:
    return float(((xf.apply(src) - np.asarray(canonical, dtype=np.float64)) ** 2).sum())


def warp_image(image: np.ndarray, xf, out_size: tuple[int, int] | None = None) -> np.ndarray:
    """Resample so that output pixel p shows input pixel xf^{-1}(p); bilinear with edge replication."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ShapeError(f"warp_image expects a 2-D image, got {img.shape}")
    H, W = img.shape
    oh, ow = out_size or (H, W)
    A = xf.linear
    if abs(np.linalg.det(A)) < 1e-12:
        raise AlignmentError("transform is not invertible")
    Ainv = np.linalg.inv(A)
    yy, xx = np.mgrid[0:oh, 0:ow].astype(np.float64)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1) - xf.t
    src = pts @ Ainv.T
    sx = np.clip(src[:, 0], 0.0, W - 1)
    sy = np.clip(src[:, 1], 0.0, H - 1)
    x0 = np.minimum(np.floor(sx).astype(int), max(W - 2, 0))
    y0 = np.minimum(np.floor(sy).astype(int), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx, fy = sx - x0, sy - y0
    f = img.astype(np.float64)
    top = f[y0, x0] * (1 - fx) + f[y0, x1] * fx
    bot = f[y1, x0] * (1 - fx) + f[y1, x1] * fx
    out = (top * (1 - fy) + bot * fy).reshape(oh, ow)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64)


def crop_lip(image: np.ndarray, center: tuple[float, float], k: int) -> np.ndarray:
    """k x k window starting at (cx - k/2, cy - k/2), edge-replicated where it leaves the image."""
    H, W = image.shape[-2:]
    if k > H or k > W:
        raise AlignmentError(f"crop side {k} larger than image {H}x{W}")
    cx, cy = center
    left = int(math.floor(cx - k / 2 + 0.5))
    top = int(math.floor(cy - k / 2 + 0.5))
    if 0 <= top and top + k <= H and 0 <= left and left + k <= W:
        return image[..., top:top + k, left:left + k].copy()
    rows = np.clip(np.arange(top, top + k), 0, H - 1)
    cols = np.clip(np.arange(left, left + k), 0, W - 1)
    return image[..., rows[:, None], cols[None, :]]


# ---------------------------------------------------------------- templates and clips

@dataclass
class Template:
    points: np.ndarray
    lip_center: tuple[float, float]
    crop_side: int

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "lip_center": list(self.lip_center), "crop_side": self.crop_side}


def default_template(size: int) -> dict:
    """Five-point template (eyes, nose tip, mouth corners) for ``size`` x ``size`` frames."""
    from .datapipe import canonical_landmarks

    pts = np.round(canonical_landmarks(size), 4)
    c = round((size - 1) / 2.0 + 0.5, 4)
    # the crop keeps the whole aligned frame so aligned and raw clips share a geometry
    return {"points": pts.tolist(), "lip_center": [c, c], "crop_side": size}


def parse_template(doc: dict) -> Template:
    try:
        pts = _points(doc["points"], "template points")
        cx, cy = (float(v) for v in doc["lip_center"])
        k = int(doc["crop_side"])
    except (KeyError, TypeError, ValueError) as e:
        raise AlignmentError(f"malformed template: {e}") from e
    if k < 1:
        raise AlignmentError("template crop_side must be positive")
    return Template(pts, (cx, cy), k)


def load_template(path: str | Path | None = None) -> Template:
    """Load a template file; with no path, the packaged 96-pixel template."""
    if path is None:
        text = resources.files("lipkit").joinpath("data/template.json").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise AlignmentError(f"cannot read template {path}: {e}") from e
    try:
        return parse_template(json.loads(text))
    except json.JSONDecodeError as e:
        raise AlignmentError(f"template {path} is not valid JSON: {e}") from e


def load_landmarks(path: str | Path) -> np.ndarray:
    try:
        arr = np.asarray(json.loads(Path(path).read_text()), dtype=np.float64)
    except (OSError, json.JSONDecodeError, ValueError) as e:
        raise AlignmentError(f"cannot read landmarks {path}: {e}") from e
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise AlignmentError(f"landmarks {path} must be [[x, y] x L] x T, got shape {arr.shape}")
    return arr


def align_clip(frames: np.ndarray, landmarks, template: Template, lip_center=None, k: int | None = None,
               affine: bool = False) -> np.ndarray:
    """Align every frame to the template and crop the lip square."""
    frames = np.asarray(frames)
    lms = np.asarray(landmarks, dtype=np.float64)
    if lms.ndim != 3 or len(lms) != len(frames):
        raise AlignmentError(f"need one landmark set per frame: {len(frames)} frames, landmarks {lms.shape}")
    center = template.lip_center if lip_center is None else lip_center
    side = template.crop_side if k is None else k
    fit = affine_fit if affine else procrustes_fit
    out = []
    for i, (frame, lm) in enumerate(zip(frames, lms)):
        try:
            if len(lm) != len(template.points):
                raise AlignmentError(f"{len(lm)} landmarks, template has {len(template.points)}")
            warped = warp_image(frame, fit(lm, template.points))
            out.append(crop_lip(warped, center, side))
        except (AlignmentError, ShapeError) as e:
            raise AlignmentError(f"frame {i}: {e}") from e
    return np.clip(np.stack(out), 0.0, 1.0).astype(frames.dtype if frames.dtype.kind == "f" else np.float32)
