"""Handcrafted binary iris codes and shifted Hamming matching.

These are the classical encode-then-align baselines: a 1D log-Gabor phase
quantizer and a di-lobe ordinal filter bank. Both inherit the circular
horizontal boundary of normalized images, so codes of rotated samples are
column-shifted codes, and matching absorbs rotation only by exhaustively
searching shifts within a fixed range.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .iris import NormalizedIris


@dataclass
class IrisCode:
    """Binary feature grid with a validity mask.

    bits/mask: bool arrays [rows, cols, planes]. digest ties a code to the
    encoder + parameters that produced it; codes only match equal digests.
    """

    bits: np.ndarray
    mask: np.ndarray
    digest: str

    def __post_init__(self):
        if self.bits.shape != self.mask.shape:
            raise ValueError(
                f"bits {self.bits.shape} and mask {self.mask.shape} differ")


def _encoder_digest(tag: str, **params) -> str:
    blob = tag + "".join(f"|{k}={params[k]}" for k in sorted(params))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _loggabor_gain(n: int, wavelength_px: float, sigma_over_f: float):
    """One-sided log-Gabor transfer function over rfft-style bins 0..n/2."""
    freqs = np.arange(n // 2 + 1) / n  # cycles per pixel
    f0 = 1.0 / wavelength_px
    gain = np.zeros(n, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logratio = np.log(freqs[1:] / f0)
    gain[1:n // 2 + 1] = np.exp(-(logratio ** 2)
                                / (2 * np.log(sigma_over_f) ** 2))
    return gain  # negative-frequency half stays zero: analytic signal


def loggabor_encode(img: NormalizedIris, wavelength_px: float = 18.0,
                    sigma_over_f: float = 0.5,
                    row_band: tuple = (16, 112)) -> IrisCode:
    """Per-row 1D circular log-Gabor phase code (2 bitplanes: Re, Im signs).

    Bits whose response magnitude falls under 1e-3 of the row's signal RMS
    carry no stable phase and are masked out, as are source-masked pixels.
    """
    lo, hi = row_band
    rows = img.image[lo:hi].astype(np.float64)
    src_mask = img.mask[lo:hi]
    n = rows.shape[1]
    gain = _loggabor_gain(n, wavelength_px, sigma_over_f)
    resp = np.fft.ifft(np.fft.fft(rows, axis=1) * gain[None, :], axis=1)
    bits = np.stack([resp.real > 0, resp.imag > 0], axis=2)
    row_rms = np.sqrt((rows ** 2).mean(axis=1, keepdims=True))
    weak = np.abs(resp) < 1e-3 * row_rms
    mask = np.repeat((src_mask & ~weak)[:, :, None], 2, axis=2)
    digest = _encoder_digest("loggabor", wavelength=wavelength_px,
                             sigma_over_f=sigma_over_f, rows=row_band)
    return IrisCode(bits, mask, digest)


def _dilobe_kernel(sigma: float, distance: float):
    """1D difference-of-offset-Gaussians profile, unit-normalized lobes."""
    reach = int(np.ceil(distance / 2.0 + 3.0 * sigma))
    t = np.arange(-reach, reach + 1, dtype=np.float64)
    pos = np.exp(-((t - distance / 2.0) ** 2) / (2 * sigma ** 2))
    neg = np.exp(-((t + distance / 2.0) ** 2) / (2 * sigma ** 2))
    return pos / pos.sum() - neg / neg.sum()


def _gauss_kernel(sigma: float):
    reach = int(np.ceil(3.0 * sigma))
    t = np.arange(-reach, reach + 1, dtype=np.float64)
    k = np.exp(-(t ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _conv_rows_circular(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Circular 1D convolution of every row (kernel centered)."""
    n = img.shape[1]
    reach = len(kernel) // 2
    out = np.zeros_like(img)
    for t, kv in zip(range(-reach, reach + 1), kernel):
        if kv != 0.0:
            out += kv * np.roll(img, -t, axis=1)
    return out


def _conv_cols_zero(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 1D convolution of every column (kernel centered)."""
    reach = len(kernel) // 2
    h = img.shape[0]
    padded = np.zeros((h + 2 * reach, img.shape[1]), dtype=img.dtype)
    padded[reach:reach + h] = img
    out = np.zeros_like(img)
    for t, kv in zip(range(len(kernel)), kernel):
        out += kv * padded[t:t + h]
    return out


def ordinal_encode(img: NormalizedIris, lobe_sigma: float = 3.0,
                   inter_lobe_distances: tuple = (9, 17)) -> IrisCode:
    """Horizontal di-lobe ordinal code: one sign bitplane per lobe distance.

    Each plane is the sign of the image filtered with two horizontally
    separated Gaussian lobes of opposite polarity (circular columns,
    zero-padded rows).
    """
    pix = img.image.astype(np.float64)
    smooth_v = _conv_cols_zero(pix, _gauss_kernel(lobe_sigma))
    planes = []
    for d in inter_lobe_distances:
        resp = _conv_rows_circular(smooth_v, _dilobe_kernel(lobe_sigma, d))
        planes.append(resp > 0)
    bits = np.stack(planes, axis=2)
    mask = np.repeat(img.mask[:, :, None], len(inter_lobe_distances), axis=2)
    digest = _encoder_digest("ordinal", sigma=lobe_sigma,
                             distances=tuple(inter_lobe_distances))
    return IrisCode(bits, mask, digest)


def hamming_match(a: IrisCode, b: IrisCode, shift_range: int = 0):
    """Masked fractional Hamming distance minimized over column shifts.

    Tries every circular shift s in [-shift_range, +shift_range] of the
    second code; returns (min_hd, best_shift) with ties resolved toward the
    smallest |s|, negative first. A shift whose joint mask covers under 1%
    of the bits scores 1.0 (unreliable comparison, never a match).
    """
    if a.digest != b.digest:
        raise ValueError(
            f"encoder digests differ: {a.digest} vs {b.digest}")
    if shift_range < 0:
        raise ValueError(f"shift_range must be >= 0, got {shift_range}")
    total_bits = a.bits.size
    best_hd, best_shift = None, None
    order = [0]
    for s in range(1, shift_range + 1):
        order.extend([-s, s])
    for s in order:
        bb = np.roll(b.bits, s, axis=1)
        bm = np.roll(b.mask, s, axis=1)
        joint = a.mask & bm
        n_joint = int(joint.sum())
        if n_joint < 0.01 * total_bits:
            hd = 1.0
        else:
            hd = float(np.count_nonzero((a.bits ^ bb) & joint)) / n_joint
        if best_hd is None or hd < best_hd:
            best_hd, best_shift = hd, s
    return best_hd, best_shift


# -- serialization ------------------------------------------------------------

_MAGIC = b"IRISCODE1\n"


def save_iriscode(code: IrisCode, path):
    """Header (digest, shape) + bit/mask planes packed little-endian."""
    r, c, p = code.bits.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(f"{code.digest} {r} {c} {p}\n".encode("ascii"))
        packed_bits = np.packbits(code.bits.reshape(-1), bitorder="little")
        packed_mask = np.packbits(code.mask.reshape(-1), bitorder="little")
        f.write(struct.pack("<I", len(packed_bits)))
        f.write(packed_bits.tobytes())
        f.write(packed_mask.tobytes())


def load_iriscode(path) -> IrisCode:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not an iris-code file")
        digest, r, c, p = f.readline().decode("ascii").split()
        r, c, p = int(r), int(c), int(p)
        (nbytes,) = struct.unpack("<I", f.read(4))
        raw_bits = np.frombuffer(f.read(nbytes), dtype=np.uint8)
        raw_mask = np.frombuffer(f.read(nbytes), dtype=np.uint8)
        if raw_bits.size != nbytes or raw_mask.size != nbytes:
            raise ValueError(f"{path}: truncated iris-code payload")
    n = r * c * p
    bits = np.unpackbits(raw_bits, count=n, bitorder="little").astype(bool)
    mask = np.unpackbits(raw_mask, count=n, bitorder="little").astype(bool)
    return IrisCode(bits.reshape(r, c, p), mask.reshape(r, c, p), digest)
