"""Deterministic synthetic image world and its analytic factor probes.

Images are 16x16 grayscale. Each sample is fully determined by its factors:
a target pair (shape class, fill level) and confounders (position, rotation,
background brightness, domain). Probes invert renders by normalized
cross-correlation template matching, so every factor can be recovered from
an image without any learned component.
"""

from __future__ import annotations

import functools
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .rng import stream

SIZE = 16
SHAPE_NAMES = ("square", "triangle", "plus", "disk")
MARKER_CLASS = 4  # oriented-bar control marker, matched but never rendered as identity
UNSPEC = -1

FILL_RANGE = (0.5, 1.0)
POS_RANGE = (-4.0, 4.0)
THETA_RANGE = (-45.0, 45.0)
BG_RANGE = (0.0, 0.4)

ROT_BUCKETS = 9
BRIGHT_BUCKETS = 4

_THETA_GRID = np.arange(-45.0, 46.0, 5.0)  # 19 angles
_OFFSET_GRID = np.arange(-4.0, 4.25, 0.5)  # 17 half-pixel offsets

_DATASET_MAGIC = b"SRATD1"


class WorldError(ValueError):
    pass


class ProbeUndefinedError(RuntimeError):
    """The image carries no usable structure (e.g. constant input)."""


@dataclass(frozen=True)
class Factors:
    shape_class: int
    fill: float
    dx: float
    dy: float
    theta: float
    bg: float
    domain: str = "base"

    def __post_init__(self):
        if self.shape_class not in (0, 1, 2, 3):
            raise WorldError(f"shape_class {self.shape_class} out of range")
        checks = (
            (self.fill, FILL_RANGE, "fill"),
            (self.dx, POS_RANGE, "dx"),
            (self.dy, POS_RANGE, "dy"),
            (self.theta, THETA_RANGE, "theta"),
            (self.bg, BG_RANGE, "bg"),
        )
        for value, (lo, hi), label in checks:
            if not (lo <= value <= hi):
                raise WorldError(f"{label}={value} outside [{lo}, {hi}]")
        if self.domain not in ("base", "finetune"):
            raise WorldError(f"unknown domain {self.domain!r}")


@dataclass(frozen=True)
class CaptionTokens:
    rot_bucket: int = UNSPEC
    bright_bucket: int = UNSPEC

    def __post_init__(self):
        if self.rot_bucket != UNSPEC and not (0 <= self.rot_bucket < ROT_BUCKETS):
            raise WorldError(f"rot_bucket {self.rot_bucket} out of range")
        if self.bright_bucket != UNSPEC and not (0 <= self.bright_bucket < BRIGHT_BUCKETS):
            raise WorldError(f"bright_bucket {self.bright_bucket} out of range")


@dataclass
class Sample:
    image: np.ndarray
    factors: Factors
    caption: CaptionTokens
    control_map: np.ndarray


def caption_for(factors: Factors) -> CaptionTokens:
    rot = min(ROT_BUCKETS - 1, int(math.floor((factors.theta + 45.0) / 10.0)))
    bright = min(BRIGHT_BUCKETS - 1, int(math.floor(factors.bg / 0.1)))
    return CaptionTokens(rot_bucket=rot, bright_bucket=bright)


def rot_bucket_center(bucket: int) -> float:
    return -40.0 + 10.0 * bucket


# ---------------------------------------------------------------------------
# canonical templates

_SUPERSAMPLE = 4


def _canonical_mask(kind: int) -> np.ndarray:
    """Antialiased canonical alpha mask, centered, orientation-asymmetric.

    Every shape breaks its rotational symmetry (notch, uneven arm, bump) so
    that the rotation probe is well-posed over the full [-45, 45] range.
    """
    n = SIZE * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / _SUPERSAMPLE - 0.5 - (SIZE - 1) / 2.0
    u, v = np.meshgrid(coords, coords, indexing="xy")  # u: +x right, v: +y down

    if kind == 0:  # square with a notched corner
        inside = np.maximum(np.abs(u), np.abs(v)) <= 2.4
        notch = (u > 1.1) & (v < -1.1)
        inside &= ~notch
    elif kind == 1:  # upward triangle, circumradius 3.4
        r = 3.4
        verts = [
            (r * math.cos(math.radians(a)), -r * math.sin(math.radians(a)))
            for a in (90.0, 210.0, 330.0)
        ]
        inside = np.ones_like(u, dtype=bool)
        for i in range(3):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % 3]
            x2, y2 = verts[(i + 2) % 3]
            side = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
            cross = (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0)
            inside &= cross * side >= 0
    elif kind == 2:  # plus with one long arm
        horiz = (np.abs(v) <= 0.9) & (np.abs(u) <= 2.4)
        vert = (np.abs(u) <= 0.9) & (v >= -3.4) & (v <= 2.4)
        inside = horiz | vert
    elif kind == 3:  # disk with a wedge notch marking the +x direction
        r2 = u * u + v * v
        inside = r2 <= 2.6**2
        wedge = (np.abs(np.degrees(np.arctan2(v, u))) <= 40.0) & (r2 >= 0.8**2)
        inside &= ~wedge
    elif kind == MARKER_CLASS:  # oriented bar used by control maps
        inside = (np.abs(u) <= 3.2) & (np.abs(v) <= 0.8)
        inside |= ((u - 2.2) ** 2 + v * v) <= 1.4**2  # fat head marks +x end
    else:
        raise WorldError(f"unknown template kind {kind}")

    mask = inside.astype(np.float64)
    return mask.reshape(SIZE, _SUPERSAMPLE, SIZE, _SUPERSAMPLE).mean(axis=(1, 3))


@functools.lru_cache(maxsize=None)
def canonical_alpha(kind: int) -> np.ndarray:
    return _canonical_mask(kind)


_CENTER = (SIZE - 1) / 2.0
_GRID_Y, _GRID_X = np.meshgrid(
    np.arange(SIZE, dtype=np.float64), np.arange(SIZE, dtype=np.float64), indexing="ij"
)


def warp_alpha(alpha: np.ndarray, theta: float, dx: float, dy: float) -> np.ndarray:
    """Rotate about the image center then translate, bilinear resampling."""
    rad = math.radians(theta)
    ct, st = math.cos(rad), math.sin(rad)
    # inverse map: undo translation, then undo rotation
    xr = _GRID_X - _CENTER - dx
    yr = _GRID_Y - _CENTER - dy
    sx = ct * xr + st * yr + _CENTER
    sy = -st * xr + ct * yr + _CENTER

    # one-pixel zero pad lets out-of-range lookups clamp to zero alpha
    padded = np.zeros((SIZE + 2, SIZE + 2), dtype=np.float64)
    padded[1:-1, 1:-1] = alpha
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    xi = np.clip(x0 + 1, 0, SIZE)
    yi = np.clip(y0 + 1, 0, SIZE)

    a00 = padded[yi, xi]
    a01 = padded[yi, xi + 1]
    a10 = padded[yi + 1, xi]
    a11 = padded[yi + 1, xi + 1]
    top = a00 * (1 - fx) + a01 * fx
    bot = a10 * (1 - fx) + a11 * fx
    return top * (1 - fy) + bot * fy


def _background(factors: Factors) -> np.ndarray:
    if factors.domain == "base":
        return np.full((SIZE, SIZE), factors.bg, dtype=np.float64)
    # finetune: horizontal gradient 0.5*bg .. 1.5*bg plus a corner vignette
    cols = np.linspace(0.5, 1.5, SIZE) * factors.bg
    grad = np.tile(cols, (SIZE, 1))
    c = (SIZE - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(SIZE), np.arange(SIZE), indexing="ij")
    r = np.sqrt((xs - c) ** 2 + (ys - c) ** 2) / (c * math.sqrt(2.0))
    vignette = 0.1 * np.clip((r - 0.6) / 0.4, 0.0, 1.0) ** 2
    return np.clip(grad - vignette, 0.0, None)


def render(factors: Factors) -> np.ndarray:
    """Rasterize factors into a 16x16 image in [0, 1]."""
    a = warp_alpha(canonical_alpha(factors.shape_class), factors.theta, factors.dx, factors.dy)
    img = a * factors.fill + (1.0 - a) * _background(factors)
    return np.clip(img, 0.0, 1.0)


def control_map(factors: Factors) -> np.ndarray:
    """Identity-free pose marker: the oriented bar at (dx, dy, theta)."""
    return warp_alpha(canonical_alpha(MARKER_CLASS), factors.theta, factors.dx, factors.dy)


# ---------------------------------------------------------------------------
# dataset sampling


def sample_factors(seed: int, index: int, domain: str) -> Factors:
    rng = stream("factors", seed, index)
    return Factors(
        shape_class=int(rng.integers(0, 4)),
        fill=float(rng.uniform(*FILL_RANGE)),
        dx=float(rng.uniform(*POS_RANGE)),
        dy=float(rng.uniform(*POS_RANGE)),
        theta=float(rng.uniform(*THETA_RANGE)),
        bg=float(rng.uniform(*BG_RANGE)),
        domain=domain,
    )


def make_sample(factors: Factors) -> Sample:
    return Sample(
        image=render(factors),
        factors=factors,
        caption=caption_for(factors),
        control_map=control_map(factors),
    )


def sample_dataset(n: int, domain: str = "base", seed: int = 0) -> list[Sample]:
    if n <= 0:
        raise WorldError("dataset size must be positive")
    if domain not in ("base", "finetune"):
        raise WorldError(f"unknown domain {domain!r}")
    return [make_sample(sample_factors(seed, i, domain)) for i in range(n)]


# ---------------------------------------------------------------------------
# probes

_BORDER = np.zeros((SIZE, SIZE), dtype=bool)
_BORDER[0, :] = _BORDER[-1, :] = True
_BORDER[:, 0] = _BORDER[:, -1] = True


@functools.lru_cache(maxsize=None)
def _template_bank():
    """Normalized templates over (class, theta grid, integer dx/dy)."""
    kinds = (0, 1, 2, 3, MARKER_CLASS)
    entries = []
    mats = []
    for kind in kinds:
        base = canonical_alpha(kind)
        for theta in _THETA_GRID:
            for dx in _OFFSET_GRID:
                for dy in _OFFSET_GRID:
                    t = warp_alpha(base, float(theta), float(dx), float(dy)).ravel()
                    t = t - t.mean()
                    norm = np.linalg.norm(t)
                    if norm < 1e-9:
                        raise WorldError(f"degenerate template (kind={kind})")
                    mats.append(t / norm)
                    entries.append((kind, float(theta), float(dx), float(dy)))
    return np.asarray(mats, dtype=np.float32), entries


@dataclass(frozen=True)
class ProbeResult:
    shape_class: int
    fill: float
    dx: float
    dy: float
    theta: float
    bg: float
    score: float


def _radial_basis() -> np.ndarray:
    c = (SIZE - 1) / 2.0
    r = np.sqrt((_GRID_X - c) ** 2 + (_GRID_Y - c) ** 2) / (c * math.sqrt(2.0))
    return np.clip((r - 0.6) / 0.4, 0.0, 1.0) ** 2


_RADIAL = _radial_basis()


def _border_fit(img: np.ndarray) -> np.ndarray:
    """Least-squares background through the border pixels.

    Basis: constant + linear gradient + corner-falloff term, enough to absorb
    smooth background structure without touching the centered shape.
    """
    ys, xs = np.nonzero(_BORDER)
    design = np.stack(
        [np.ones_like(xs, dtype=np.float64), xs, ys, _RADIAL[_BORDER]], axis=1
    )
    coef, *_ = np.linalg.lstsq(design, img[_BORDER], rcond=None)
    return coef[0] + coef[1] * _GRID_X + coef[2] * _GRID_Y + coef[3] * _RADIAL


def probe(image: np.ndarray) -> ProbeResult:
    img = np.asarray(image, dtype=np.float64).reshape(SIZE, SIZE)
    bg_est = float(np.median(img[_BORDER]))

    z = (img - _border_fit(img)).ravel()
    z = z - z.mean()
    znorm = np.linalg.norm(z)
    if znorm < 1e-6:
        raise ProbeUndefinedError("image is (near-)constant; probes undefined")
    z = z / znorm

    bank, entries = _template_bank()
    scores = bank @ z.astype(np.float32)
    best = int(np.argmax(scores))
    kind = entries[best][0]

    base = canonical_alpha(kind)

    def ncc(th, ox, oy):
        t = warp_alpha(base, th, ox, oy).ravel()
        t = t - t.mean()
        norm = np.linalg.norm(t)
        if norm < 1e-9:
            return -1.0
        return float(np.dot(t, z)) / norm

    # coordinate-wise quadratic refinement below the grid resolution
    def refine(axis_eval, x0, step, lo, hi, rounds=2):
        x = x0
        for _ in range(rounds):
            sm, s0, sp = (axis_eval(np.clip(x + d, lo, hi)) for d in (-step, 0.0, step))
            denom = sm - 2.0 * s0 + sp
            if denom < -1e-12:
                # trust region: flat curvature must not extrapolate wildly
                x = x + float(np.clip(step * 0.5 * (sm - sp) / denom, -step, step))
            x = float(np.clip(x, lo, hi))
            step *= 0.5
        return x

    def refine_pose(theta0, dx0, dy0):
        th = refine(lambda t: ncc(t, dx0, dy0), theta0, 5.0, *THETA_RANGE)
        ox = refine(lambda o: ncc(th, o, dy0), dx0, 0.5, *POS_RANGE)
        oy = refine(lambda o: ncc(th, ox, o), dy0, 0.5, *POS_RANGE)
        th = refine(lambda t: ncc(t, ox, oy), th, 2.5, *THETA_RANGE)
        return ncc(th, ox, oy), th, ox, oy

    # coarse peaks in neighboring angle cells can out-refine the argmax cell,
    # so polish the best few same-class candidates and keep the winner
    order = np.argsort(scores)[::-1]
    candidates = [i for i in order[:64] if entries[i][0] == kind][:4]
    match_score, theta, dx, dy = max(refine_pose(*entries[i][1:]) for i in candidates)

    def fill_at(th, ox, oy):
        # joint least squares img = a*fill + (1-a)*bg at the matched pose
        a = warp_alpha(base, th, ox, oy).ravel()
        design = np.stack([a, 1.0 - a], axis=1)
        coef, *_ = np.linalg.lstsq(design, img.ravel(), rcond=None)
        return float(coef[0])

    fill = float("nan")
    if kind != MARKER_CLASS:
        fill = fill_at(theta, dx, dy)
        # second pass with contrast-aware matching: the residual equals
        # alpha * (fill - background), so weighting the template by the
        # local contrast field fixes poses of barely-visible shapes
        bg_field = _border_fit(img)
        contrast = (fill - bg_field).ravel()
        if np.abs(contrast).max() > 1e-6:
            resid = (img - bg_field).ravel()

            def ncc_weighted(th, ox, oy):
                t = warp_alpha(base, th, ox, oy).ravel() * contrast
                t = t - t.mean()
                norm = np.linalg.norm(t)
                if norm < 1e-9:
                    return -1.0
                return float(np.dot(t, resid - resid.mean())) / norm

            def polish(th0):
                th = refine(lambda t: ncc_weighted(t, dx, dy), th0, 2.5, *THETA_RANGE, rounds=4)
                ox = refine(lambda o: ncc_weighted(th, o, dy), dx, 0.5, *POS_RANGE)
                oy = refine(lambda o: ncc_weighted(th, ox, o), dy, 0.5, *POS_RANGE)
                th = refine(lambda t: ncc_weighted(t, ox, oy), th, 1.25, *THETA_RANGE, rounds=3)
                return ncc_weighted(th, ox, oy), th, ox, oy

            # multiple angle starts: weak-contrast poses have shallow optima
            starts = (theta,) if match_score > 0.997 else (theta - 7.5, theta, theta + 7.5)
            _, theta, dx, dy = max(polish(t0) for t0 in starts)
            fill = fill_at(theta, dx, dy)

    return ProbeResult(
        shape_class=kind,
        fill=fill,
        dx=dx,
        dy=dy,
        theta=theta,
        bg=bg_est,
        score=float(scores[best]),
    )


def probe_rotation(image: np.ndarray) -> float:
    return probe(image).theta


def probe_position(image: np.ndarray) -> tuple[float, float]:
    r = probe(image)
    return float(r.dx), float(r.dy)


def probe_identity(image: np.ndarray) -> tuple[int, float]:
    r = probe(image)
    return r.shape_class, r.fill


def probe_brightness(image: np.ndarray) -> float:
    img = np.asarray(image, dtype=np.float64).reshape(SIZE, SIZE)
    if float(np.std(img)) < 1e-9:
        raise ProbeUndefinedError("constant image")
    return float(np.median(img[_BORDER]))


# ---------------------------------------------------------------------------
# dataset files and PGM export

_DOMAIN_CODE = {"base": 0.0, "finetune": 1.0}
_CODE_DOMAIN = {v: k for k, v in _DOMAIN_CODE.items()}

_RECORD_LAYOUT = [
    "image[256]",
    "shape_class",
    "fill",
    "dx",
    "dy",
    "theta",
    "bg",
    "domain_code",
    "rot_bucket",
    "bright_bucket",
    "control_map[256]",
]
_RECORD_FLOATS = 256 + 9 + 256


def save_dataset(samples: list[Sample], path, domain: str, seed: int) -> None:
    header = json.dumps(
        {"count": len(samples), "domain": domain, "seed": seed, "layout": _RECORD_LAYOUT}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for s in samples:
            rec = np.concatenate(
                [
                    s.image.ravel(),
                    [
                        s.factors.shape_class,
                        s.factors.fill,
                        s.factors.dx,
                        s.factors.dy,
                        s.factors.theta,
                        s.factors.bg,
                        _DOMAIN_CODE[s.factors.domain],
                        s.caption.rot_bucket,
                        s.caption.bright_bucket,
                    ],
                    s.control_map.ravel(),
                ]
            ).astype("<f4")
            fh.write(rec.tobytes())


def load_dataset(path) -> list[Sample]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(_DATASET_MAGIC)] != _DATASET_MAGIC:
        raise WorldError(f"{path}: bad magic")
    (hlen,) = struct.unpack_from("<Q", raw, len(_DATASET_MAGIC))
    offset = len(_DATASET_MAGIC) + 8
    header = json.loads(raw[offset : offset + hlen].decode("utf-8"))
    offset += hlen
    count = header["count"]
    expected = count * _RECORD_FLOATS * 4
    if len(raw) - offset != expected:
        raise WorldError(f"{path}: payload length mismatch")

    samples = []
    data = np.frombuffer(raw, dtype="<f4", offset=offset).reshape(count, _RECORD_FLOATS)
    for rec in data:
        rec = rec.astype(np.float64)
        factors = Factors(
            shape_class=int(rec[256]),
            fill=float(rec[257]),
            dx=float(rec[258]),
            dy=float(rec[259]),
            theta=float(rec[260]),
            bg=float(rec[261]),
            domain=_CODE_DOMAIN[float(rec[262])],
        )
        caption = CaptionTokens(int(rec[263]), int(rec[264]))
        samples.append(
            Sample(
                image=rec[:256].reshape(SIZE, SIZE),
                factors=factors,
                caption=caption,
                control_map=rec[265:].reshape(SIZE, SIZE),
            )
        )
    return samples


def write_pgm(image: np.ndarray, path) -> None:
    """Binary PGM (P5, maxval 255)."""
    img = np.asarray(image, dtype=np.float64)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
