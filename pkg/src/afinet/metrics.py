"""Verification-protocol evaluation: pair generation under rotation
regimes, deep-feature scoring, ROC/EER/FRR@FAR, and input-gradient
saliency maps.

Deep scores are cosine similarities (higher = more similar); the ROC
machinery assumes that orientation. Iris-code Hamming distances are mapped
through `distance_to_similarity` before entering the same machinery.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import AfinetModel, forward
from .tensor import Tensor, no_grad

REGIMES = ("none", "0", "20", "45")


def regime_angle(regime: str) -> float:
    """Imposed angle difference for a pairing regime."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}, expected one "
                         f"of {REGIMES}")
    return 0.0 if regime == "none" else float(regime)


@dataclass
class Pair:
    a: int
    b: int
    angle_deg: float


@dataclass
class PairSet:
    genuine: list
    impostor: list
    regime: str

    def __post_init__(self):
        for p in self.genuine + self.impostor:
            if p.a == p.b:
                raise ValueError(f"pair of sample {p.a} with itself")


def make_pairs(labels, regime: str, n_genuine: int | None = None,
               n_impostor: int | None = None, seed: int = 0) -> PairSet:
    """Deterministic genuine/impostor pairs over a test-split label array.

    Regime "none" pairs samples as-is; angle regimes additionally rotate
    the second member by the regime angle at scoring time. Counts of None
    mean exhaustive enumeration.
    """
    labels = np.asarray(labels)
    angle = regime_angle(regime)
    classes = {}
    for idx, lab in enumerate(labels):
        classes.setdefault(int(lab), []).append(idx)
    if len(classes) < 2:
        raise ValueError(f"need >= 2 classes for pairing, got {len(classes)}")

    genuine = []
    for members in classes.values():
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                genuine.append(Pair(members[i], members[j], angle))
    keys = sorted(classes)
    impostor = []
    for ci in range(len(keys)):
        for cj in range(ci + 1, len(keys)):
            for i in classes[keys[ci]]:
                for j in classes[keys[cj]]:
                    impostor.append(Pair(i, j, angle))
    if not genuine:
        raise ValueError("no genuine pairs: every class has one sample")

    rng = np.random.default_rng(np.random.SeedSequence([0x9A12, int(seed)]))
    if n_genuine is not None and n_genuine < len(genuine):
        sel = rng.choice(len(genuine), size=n_genuine, replace=False)
        genuine = [genuine[i] for i in sorted(sel)]
    if n_impostor is not None and n_impostor < len(impostor):
        sel = rng.choice(len(impostor), size=n_impostor, replace=False)
        impostor = [impostor[i] for i in sorted(sel)]
    return PairSet(genuine, impostor, regime)


# -- deep scoring -----------------------------------------------------------


def _rotate_batch(images: np.ndarray, angle_deg: float) -> np.ndarray:
    cols = int(np.round(angle_deg / 360.0 * images.shape[-1]))
    return np.roll(images, cols, axis=-1) if cols else images


def deep_features(model: AfinetModel, images: np.ndarray,
                  batch: int = 16) -> np.ndarray:
    """L2-normalized 256-dim matching features for [M,1,128,128] images."""
    feats = []
    with no_grad():
        for i in range(0, len(images), batch):
            f, _ = forward(model, Tensor(images[i:i + batch]
                                         .astype(np.float32)))
            feats.append(f.data)
    feats = np.concatenate(feats, axis=0).astype(np.float64)
    norms = np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    return feats / norms


def score_pairs_deep(model: AfinetModel, images: np.ndarray,
                     pairs: PairSet, batch: int = 16):
    """Cosine similarity of matching features, second member rotated by the
    pair's imposed angle. Returns (genuine_scores, impostor_scores)."""
    feats0 = deep_features(model, images, batch)
    angle_feats = {0.0: feats0}
    angles = {p.angle_deg for p in pairs.genuine + pairs.impostor}
    for a in angles:
        if a not in angle_feats:
            angle_feats[a] = deep_features(model, _rotate_batch(images, a),
                                           batch)

    def score(plist):
        return np.array([float(feats0[p.a] @ angle_feats[p.angle_deg][p.b])
                         for p in plist])

    return score(pairs.genuine), score(pairs.impostor)


def distance_to_similarity(distances) -> np.ndarray:
    """Map lower-is-better distances (e.g. Hamming) onto the ROC harness's
    higher-is-better orientation."""
    return -np.asarray(distances, dtype=np.float64)


# -- ROC / EER / FRR@FAR ------------------------------------------------------


@dataclass
class EvalReport:
    genuine_scores: np.ndarray
    impostor_scores: np.ndarray
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray
    eer: float
    frr_at_far: dict
    unreliable_far_levels: list
    metadata: dict = field(default_factory=dict)

    def roc_csv(self) -> str:
        lines = ["threshold,far,frr"]
        for t, fa, fr in zip(self.thresholds, self.far, self.frr):
            lines.append(f"{t!r},{fa!r},{fr!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "genuine_scores": list(self.genuine_scores),
            "impostor_scores": list(self.impostor_scores),
            "eer": self.eer,
            "frr_at_far": {repr(k): v for k, v in self.frr_at_far.items()},
            "unreliable_far_levels": [repr(v) for v in
                                      self.unreliable_far_levels],
            "metadata": self.metadata,
        })

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        report = compute_roc(
            np.array(d["genuine_scores"], dtype=np.float64),
            np.array(d["impostor_scores"], dtype=np.float64),
            far_levels=[float(k) for k in d["frr_at_far"]])
        report.metadata = d["metadata"]
        return report


def compute_roc(genuine, impostor,
                far_levels=(1e-2, 1e-3, 1e-4)) -> EvalReport:
    """Full threshold sweep (higher score = more similar; accept when
    score >= threshold). EER is linearly interpolated at the FAR = FRR
    crossing; FRR@FAR is read at the loosest threshold whose FAR still
    meets the level, flagged unreliable when the impostor count gives less
    than 10 expected false accepts at that level.
    """
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("compute_roc needs non-empty score sets")

    thresholds = np.unique(np.concatenate([genuine, impostor]))
    far = np.array([(impostor >= t).mean() for t in thresholds])
    frr = np.array([(genuine < t).mean() for t in thresholds])

    eer = _interpolate_eer(far, frr)

    frr_at = {}
    unreliable = []
    for level in far_levels:
        ok = np.nonzero(far <= level)[0]
        frr_at[level] = float(frr[ok[0]]) if ok.size else 1.0
        if impostor.size < 10.0 / level:
            unreliable.append(level)
    return EvalReport(genuine, impostor, thresholds, far, frr, eer, frr_at,
                      unreliable)


def _interpolate_eer(far: np.ndarray, frr: np.ndarray) -> float:
    # walking thresholds upward, diff = frr - far goes from <=0 toward >0
    diff = frr - far
    if diff[0] >= 0:
        return float((far[0] + frr[0]) / 2) if diff[0] == 0 else float(frr[0])
    idx = np.nonzero(diff >= 0)[0]
    if idx.size == 0:
        return float((far[-1] + frr[-1]) / 2)
    i = idx[0]
    d0, d1 = diff[i - 1], diff[i]
    if d1 == d0:
        lam = 0.0
    else:
        lam = -d0 / (d1 - d0)
    return float(far[i - 1] + lam * (far[i] - far[i - 1]))


# -- saliency ----------------------------------------------------------------


def input_gradient_map(forward_fn, image: np.ndarray,
                       class_index: int) -> np.ndarray:
    """|d logit[class] / d pixel| for a scalar-logit forward function,
    min-max normalized to [0,1] (all-zero map when the gradient vanishes).
    """
    x = Tensor(image[None, None].astype(np.float32), requires_grad=True)
    logits = forward_fn(x)
    n_classes = logits.shape[1]
    if not 0 <= class_index < n_classes:
        raise ValueError(
            f"class index {class_index} out of range [0, {n_classes})")
    pick = np.zeros((1, n_classes), dtype=np.float32)
    pick[0, class_index] = 1.0
    from .tensor import mul, tsum
    tsum(mul(logits, Tensor(pick))).backward()
    sal = np.abs(x.grad[0, 0]).astype(np.float64)
    span = sal.max() - sal.min()
    if span <= 0:
        return np.zeros_like(sal)
    return (sal - sal.min()) / span


def saliency_map(model: AfinetModel, image: np.ndarray,
                 class_index: int) -> np.ndarray:
    """128x128 saliency of one (intensity-normalized) image."""
    return input_gradient_map(lambda x: forward(model, x)[1], image,
                              class_index)


def save_saliency_pgm(sal: np.ndarray, path):
    from .iris import save_pgm
    save_pgm(path, np.round(sal * 255.0))
