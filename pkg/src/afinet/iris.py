"""Normalized-iris production: rubber-sheet unwrapping, intensity
normalization, rotation as circular column shift, synthetic iris classes,
and dataset manifest / image file handling.

Coordinate convention for normalized images: rows are radial (row 0 on the
pupil boundary), columns are angular and wrap modulo the width. An eye
rotation therefore becomes a circular column shift, which the generator and
the evaluation protocol exploit by construction.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

NORM_SIZE = 128


class ManifestError(ValueError):
    """Manifest or image file violates the dataset contract."""


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float


@dataclass
class EyeImage:
    """8-bit grayscale eye with pre-localized pupil and iris circles."""

    pixels: np.ndarray
    pupil: Circle
    iris: Circle

    def validate(self):
        h, w = self.pixels.shape
        if not self.pupil.r < self.iris.r:
            raise ValueError(
                f"pupil radius {self.pupil.r} must be smaller than iris "
                f"radius {self.iris.r}")
        for name, c in (("pupil", self.pupil), ("iris", self.iris)):
            if (c.cx - c.r < 0 or c.cx + c.r > w - 1
                    or c.cy - c.r < 0 or c.cy + c.r > h - 1):
                raise ValueError(
                    f"{name} circle (cx={c.cx}, cy={c.cy}, r={c.r}) leaves "
                    f"the {w}x{h} image bounds")


@dataclass
class NormalizedIris:
    """128x128 unwrapped iris in (radius x angle) coordinates."""

    image: np.ndarray              # float32 [128,128]
    mask: np.ndarray               # bool [128,128]
    class_id: int = -1
    rotation_deg: float = 0.0

    def copy(self) -> "NormalizedIris":
        return NormalizedIris(self.image.copy(), self.mask.copy(),
                              self.class_id, self.rotation_deg)


def _bilinear_fetch(img: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    """Clamped bilinear lookup of float positions in a 2-D image."""
    h, w = img.shape
    yc = np.clip(ys, 0, h - 1)
    xc = np.clip(xs, 0, w - 1)
    y0 = np.floor(yc).astype(np.int64)
    x0 = np.floor(xc).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = yc - y0
    wx = xc - x0
    imgf = img.astype(np.float64)
    top = imgf[y0, x0] * (1 - wx) + imgf[y0, x1] * wx
    bot = imgf[y1, x0] * (1 - wx) + imgf[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def rubber_sheet(eye: EyeImage, out_h: int = NORM_SIZE,
                 out_w: int = NORM_SIZE) -> NormalizedIris:
    """Unwrap the annulus between the pupil and iris circles.

    Each output point blends the pupil-boundary and iris-boundary points at
    its angle (handles non-concentric circles), then samples the eye image
    bilinearly. Mask is False where the sample point leaves the image.
    """
    eye.validate()
    h, w = eye.pixels.shape
    theta = 2 * np.pi * np.arange(out_w) / out_w
    t = (np.arange(out_h) / (out_h - 1))[:, None]
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # columns advance counterclockwise on screen (image y axis points down)
    px = eye.pupil.cx + eye.pupil.r * cos_t
    py = eye.pupil.cy - eye.pupil.r * sin_t
    ix = eye.iris.cx + eye.iris.r * cos_t
    iy = eye.iris.cy - eye.iris.r * sin_t
    xs = (1 - t) * px[None, :] + t * ix[None, :]
    ys = (1 - t) * py[None, :] + t * iy[None, :]
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    out = _bilinear_fetch(eye.pixels, ys, xs)
    return NormalizedIris(out.astype(np.float32), valid)


def render_annular(pupil: Circle, iris: Circle, shape, fn) -> np.ndarray:
    """Rasterize fn(r, theta) over a concentric annulus onto an 8-bit canvas.

    r is the normalized radial position in [0, 1] between the two boundary
    circles; a test helper for driving rubber_sheet with known scenes.
    """
    if (pupil.cx, pupil.cy) != (iris.cx, iris.cy):
        raise ValueError("render_annular requires concentric circles")
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs - pupil.cx
    dy = pupil.cy - ys
    theta = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    rho = np.hypot(dx, dy)
    rnorm = (rho - pupil.r) / (iris.r - pupil.r)
    # texture extends slightly past both boundaries: interpolation at r=0
    # and r=1 reads half a pixel outside the annulus
    vals = np.asarray(fn(np.clip(rnorm, 0, 1), theta), dtype=np.float64)
    return np.clip(np.round(vals), 0, 255).astype(np.uint8)


def intensity_normalize(img: NormalizedIris, mean: float,
                        std: float) -> NormalizedIris:
    """(pixel - mean) / std over the whole grid."""
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    out = img.copy()
    out.image = ((img.image - mean) / std).astype(np.float32)
    return out


def rotation_columns(angle_deg: float, width: int = NORM_SIZE) -> int:
    return int(np.round(angle_deg / 360.0 * width))


def rotate_normalized(img: NormalizedIris,
                      angle_deg: float) -> NormalizedIris:
    """Circular column shift by round(angle/360 * width) columns."""
    cols = rotation_columns(angle_deg, img.image.shape[1])
    return NormalizedIris(np.roll(img.image, cols, axis=1),
                          np.roll(img.mask, cols, axis=1),
                          img.class_id,
                          img.rotation_deg + angle_deg)


# -- synthetic iris classes ----------------------------------------------------


@dataclass(frozen=True)
class Degradation:
    """Per-sample nuisance factors applied on top of the class texture.

    rotation_range_deg: uniform eye-rotation range (degrees).
    dilation_range: range of the radial warp exponent offset; a sample's
        rows are resampled at r**(1+d), mimicking pupil-dilation stretch.
    noise_std: additive Gaussian noise, in 8-bit gray levels.
    shading_amp: amplitude of a smooth multiplicative illumination field.
    """

    rotation_range_deg: tuple = (0.0, 0.0)
    dilation_range: tuple = (0.0, 0.0)
    noise_std: float = 0.0
    shading_amp: float = 0.0

    def validate(self):
        for name, rng_ in (("rotation_range_deg", self.rotation_range_deg),
                           ("dilation_range", self.dilation_range)):
            if rng_[1] < rng_[0]:
                raise ValueError(f"{name} is empty: {rng_}")
        if self.noise_std < 0 or self.shading_amp < 0:
            raise ValueError("noise_std and shading_amp must be >= 0")


def _bandpass_layer(rng: np.random.Generator, fx0, fy0, bw_x, bw_y):
    """Oriented band-pass noise, horizontally periodic by construction."""
    white = rng.standard_normal((NORM_SIZE, NORM_SIZE))
    spec = np.fft.fft2(white)
    fy = np.fft.fftfreq(NORM_SIZE)[:, None]
    fx = np.fft.fftfreq(NORM_SIZE)[None, :]
    gain = np.exp(-((np.abs(fx) - fx0) ** 2) / (2 * bw_x ** 2)) \
        * np.exp(-((np.abs(fy) - fy0) ** 2) / (2 * bw_y ** 2))
    layer = np.fft.ifft2(spec * gain).real
    return layer / max(layer.std(), 1e-12)


_COMMON_FIELD = None


def _common_field() -> np.ndarray:
    """Class-independent coarse structure shared by every synthetic iris.

    Real irises share most of their gross appearance across identities;
    only finer texture is discriminative. This layer sits at very low
    frequencies, below the passband of the handcrafted encoders, so it
    biases neither Hamming impostor scores nor the class textures' NCC
    much while making identities non-trivial for raw random features.
    """
    global _COMMON_FIELD
    if _COMMON_FIELD is None:
        rng = np.random.default_rng(np.random.SeedSequence([0xC0117770]))
        _COMMON_FIELD = _bandpass_layer(rng, fx0=0.0, fy0=0.0,
                                        bw_x=0.008, bw_y=0.008)
    return _COMMON_FIELD


def synth_base_texture(class_seed: int) -> np.ndarray:
    """Deterministic 8-bit class-identity texture in normalized coords.

    The shared coarse field plus two class-specific layers: radial furrow
    striations (fine angular band-pass, radially elongated) and mid-scale
    blobs; the class layers are drawn entirely from class_seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(class_seed)]))
    furrows = _bandpass_layer(rng, fx0=1 / 18.0, fy0=0.0,
                              bw_x=0.018, bw_y=0.035)
    blobs = _bandpass_layer(rng, fx0=0.0, fy0=0.0, bw_x=0.055, bw_y=0.055) \
        - _bandpass_layer(rng, fx0=0.0, fy0=0.0, bw_x=0.015, bw_y=0.015)
    tex = 0.7 * _common_field() + 1.0 * furrows \
        + 0.8 * blobs / max(blobs.std(), 1e-12)
    tex = (tex - tex.mean()) / max(tex.std(), 1e-12)
    return np.clip(np.round(128.0 + 42.0 * tex), 0, 255).astype(np.uint8)


def _radial_dilate(img: np.ndarray, gamma: float) -> np.ndarray:
    """Resample rows along the monotone warp r -> r**gamma."""
    if gamma == 1.0:
        return img.copy()
    h = img.shape[0]
    r = np.arange(h) / (h - 1)
    src = (r ** gamma) * (h - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, h - 1)
    w = (src - lo)[:, None]
    return (1 - w) * img[lo] + w * img[hi]


def synth_iris_sample(class_seed: int, sample_idx: int,
                      degradation: Degradation) -> NormalizedIris:
    """One synthetic sample; bit-identical under fixed seeds."""
    degradation.validate()
    base = synth_base_texture(class_seed).astype(np.float64)
    rng = np.random.default_rng(
        np.random.SeedSequence([int(class_seed), int(sample_idx)]))
    gamma = 1.0 + rng.uniform(*degradation.dilation_range)
    angle = rng.uniform(*degradation.rotation_range_deg)
    shade_phase = rng.uniform(0, 2 * np.pi)
    shade_tilt = rng.uniform(-1.0, 1.0)

    img = _radial_dilate(base, gamma)
    img = np.roll(img, rotation_columns(angle), axis=1)
    if degradation.shading_amp > 0:
        jj = np.arange(NORM_SIZE)[None, :] / NORM_SIZE
        ii = np.arange(NORM_SIZE)[:, None] / (NORM_SIZE - 1)
        field = 1.0 + degradation.shading_amp * (
            0.6 * np.cos(2 * np.pi * jj - shade_phase)
            + 0.4 * shade_tilt * (ii - 0.5))
        img = img * field
    if degradation.noise_std > 0:
        img = img + rng.normal(0.0, degradation.noise_std,
                               (NORM_SIZE, NORM_SIZE))
    img = np.clip(np.round(img), 0, 255).astype(np.float32)
    return NormalizedIris(img, np.ones((NORM_SIZE, NORM_SIZE), dtype=bool),
                          class_id=int(class_seed), rotation_deg=angle)


def synth_iris_class(class_seed: int, count: int,
                     degradation: Degradation) -> list:
    """Deterministic list of samples sharing one class texture."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return [synth_iris_sample(class_seed, i, degradation)
            for i in range(count)]


# -- image files ------------------------------------------------------------


def save_pgm(path, img: np.ndarray):
    """Binary P5, maxval 255."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def _read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)

    def token():
        tok = b""
        while True:
            ch = buf.read(1)
            if not ch:
                raise ManifestError(f"{path}: truncated PGM header")
            if ch in b" \t\r\n":
                if tok:
                    return tok
                continue
            if ch == b"#":
                buf.readline()
                continue
            tok += ch

    magic = token()
    if magic != b"P5":
        raise ManifestError(f"{path}: not a binary PGM (magic {magic!r})")
    w, h, maxval = int(token()), int(token()), int(token())
    if maxval != 255:
        raise ManifestError(f"{path}: PGM maxval {maxval}, need 8-bit (255)")
    raw = buf.read(w * h)
    if len(raw) != w * h:
        raise ManifestError(f"{path}: PGM pixel data truncated")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w)


def load_normalized(path) -> NormalizedIris:
    """Read a 128x128 8-bit grayscale PGM or PNG as a NormalizedIris."""
    spath = str(path)
    if spath.lower().endswith((".pgm",)):
        arr = _read_pgm(spath)
    elif spath.lower().endswith(".png"):
        from PIL import Image
        with Image.open(spath) as im:
            if im.mode != "L":
                raise ManifestError(
                    f"{spath}: PNG mode {im.mode!r}, need 8-bit grayscale 'L'")
            arr = np.asarray(im)
    else:
        raise ManifestError(f"{spath}: unsupported image format "
                            "(expect .pgm or .png)")
    if arr.shape != (NORM_SIZE, NORM_SIZE):
        raise ManifestError(
            f"{spath}: resolution {arr.shape[1]}x{arr.shape[0]}, "
            f"need {NORM_SIZE}x{NORM_SIZE}")
    return NormalizedIris(arr.astype(np.float32),
                          np.ones(arr.shape, dtype=bool))


def save_normalized(img: NormalizedIris, path):
    """Write the (integer-valued, 0..255) image grid as PGM or PNG."""
    spath = str(path)
    arr = np.clip(np.round(img.image), 0, 255).astype(np.uint8)
    if spath.lower().endswith(".pgm"):
        save_pgm(spath, arr)
    elif spath.lower().endswith(".png"):
        from PIL import Image
        Image.fromarray(arr, mode="L").save(spath)
    else:
        raise ManifestError(f"{spath}: unsupported image format "
                            "(expect .pgm or .png)")


# -- manifests ------------------------------------------------------------


@dataclass
class ManifestRecord:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    records: list
    mean: float | None = None
    std: float | None = None

    def split(self, tag: str) -> list:
        return [r for r in self.records if r.split == tag]

    def labels(self, tag: str) -> list:
        return sorted({r.label for r in self.records if r.split == tag})

    def compute_intensity_stats(self, loader=load_normalized):
        """Dataset-level mean/std from the train split's pixels."""
        acc_n, acc_s, acc_s2 = 0, 0.0, 0.0
        for rec in self.split("train"):
            px = loader(rec.path).image.astype(np.float64)
            acc_n += px.size
            acc_s += px.sum()
            acc_s2 += (px ** 2).sum()
        if acc_n == 0:
            raise ManifestError("manifest has no train images")
        self.mean = acc_s / acc_n
        var = max(acc_s2 / acc_n - self.mean ** 2, 0.0)
        self.std = math.sqrt(var) if var > 0 else 1.0
        return self.mean, self.std


def _validate_manifest(records) -> None:
    by_split = {}
    for rec in records:
        by_split.setdefault(rec.split, set()).add(rec.label)
    train = by_split.get("train", set())
    test = by_split.get("test", set())
    shared = train & test
    if shared:
        raise ManifestError(
            f"class {sorted(shared)[0]} appears in both train and test "
            "splits; the protocol requires disjoint class sets")
    for tag, labels in by_split.items():
        lo, hi = min(labels), max(labels)
        if len(labels) != hi - lo + 1:
            missing = sorted(set(range(lo, hi + 1)) - labels)[0]
            raise ManifestError(
                f"{tag} split labels are not dense: label {missing} missing "
                f"in range [{lo}, {hi}]")
    if train and min(train) != 0:
        raise ManifestError(
            f"train split labels must start at 0, found {min(train)}")


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a `path,label,split` CSV manifest."""
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["path", "label", "split"]:
            raise ManifestError(
                f"{path}:1: bad header {header!r}, expected path,label,split")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, "
                                    f"got {len(row)}")
            p, label_s, split = row
            try:
                label = int(label_s)
            except ValueError:
                raise ManifestError(
                    f"{path}:{lineno}: label {label_s!r} is not an integer")
            if label < 0:
                raise ManifestError(f"{path}:{lineno}: negative label {label}")
            if split not in ("train", "test"):
                raise ManifestError(
                    f"{path}:{lineno}: unknown split {split!r} "
                    "(expect train or test)")
            records.append(ManifestRecord(p, label, split))
    if not records:
        raise ManifestError(f"{path}: empty manifest")
    _validate_manifest(records)
    return DatasetManifest(records)


def save_manifest(records, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "label", "split"])
        for rec in records:
            writer.writerow([rec.path, rec.label, rec.split])
