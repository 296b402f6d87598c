"""The recognition network and its persistence.

Architecture: four conv blocks (Maxout conv -> 2x2 maxpool -> deformable
3x3 conv with a zero-initialized offset predictor), turning a 1x128x128
normalized iris into a 192x8x8 local-feature map; a trainable VLAD encoder
that soft-assigns the 64 local descriptors to 25 centers and aggregates
residuals; and a two-layer head whose 256-wide first layer is the matching
feature.

A 16-column input shift (a 45-degree eye rotation) shifts the 8x8 map by
exactly one column; because the VLAD sum is permutation-invariant over
positions, the encoded feature is unchanged. The "flatten" variant wires
the 8x8 map straight into the head instead and deliberately lacks that
invariance.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .tensor import Tensor, add, concat, matmul, no_grad, permute, \
    reshape, slice_channels

# (kernel, in channels, out channels) per block; conv emits 2x out channels
# and maxout halves them
BLOCK_SPECS = ((9, 1, 48), (5, 48, 96), (5, 96, 128), (4, 128, 192))
DESCRIPTOR_DIM = 192
N_CLUSTERS = 25
VLAD_DIM = N_CLUSTERS * DESCRIPTOR_DIM      # 4800
GRID_POSITIONS = 8 * 8
FLAT_DIM = DESCRIPTOR_DIM * GRID_POSITIONS  # 12288, flatten-variant head input
FEATURE_DIM = 256
CHECKPOINT_VERSION = 1

VARIANT_VLAD = "vlad"
VARIANT_FLATTEN = "flatten"


class CheckpointError(ValueError):
    """Checkpoint file rejected; message names the offending field."""


@dataclass
class ConvBlockParams:
    conv_kernel: Tensor
    conv_bias: Tensor
    offset_kernel: Tensor
    offset_bias: Tensor
    deform_kernel: Tensor
    deform_bias: Tensor


@dataclass
class ExtractorParams:
    blocks: list


@dataclass
class VladParams:
    weights: Tensor   # [K, C] assignment weights, one row per cluster
    biases: Tensor    # [K]
    centers: Tensor   # [K, C]


@dataclass
class HeadParams:
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor


@dataclass
class AfinetModel:
    extractor: ExtractorParams
    vlad: VladParams | None
    head: HeadParams
    num_classes: int
    variant: str = VARIANT_VLAD
    seed: int = 0
    dataset_digest: str = ""
    version: int = CHECKPOINT_VERSION

    def named_parameters(self):
        out = []
        for i, blk in enumerate(self.extractor.blocks):
            for fname in ("conv_kernel", "conv_bias", "offset_kernel",
                          "offset_bias", "deform_kernel", "deform_bias"):
                out.append((f"block{i}.{fname}", getattr(blk, fname)))
        if self.variant == VARIANT_VLAD:
            out.append(("vlad.weights", self.vlad.weights))
            out.append(("vlad.biases", self.vlad.biases))
            out.append(("vlad.centers", self.vlad.centers))
        for fname in ("fc1_weight", "fc1_bias", "fc2_weight", "fc2_bias"):
            out.append((f"head.{fname}", getattr(self.head, fname)))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def parameter_groups(self):
        """(extractor tensors, encoder+head tensors) for the two-rate SGD."""
        extractor = [t for n, t in self.named_parameters()
                     if n.startswith("block")]
        rest = [t for n, t in self.named_parameters()
                if not n.startswith("block")]
        return extractor, rest

    def parameter_count(self):
        return sum(t.size for t in self.parameters())


def expected_parameter_count(num_classes: int,
                             variant: str = VARIANT_VLAD) -> int:
    """Closed-form parameter count from the block table (used as an audit)."""
    total = 0
    for k, cin, cout in BLOCK_SPECS:
        total += 2 * cout * cin * k * k + 2 * cout       # maxout conv
        total += 18 * cout * 3 * 3 + 18                  # offset predictor
        total += cout * cout * 3 * 3 + cout              # deform conv
    if variant == VARIANT_VLAD:
        total += N_CLUSTERS * DESCRIPTOR_DIM * 2 + N_CLUSTERS
        head_in = VLAD_DIM
    else:
        head_in = FLAT_DIM
    total += head_in * FEATURE_DIM + FEATURE_DIM
    total += FEATURE_DIM * num_classes + num_classes
    return total


# hand-audited constant for the standard configuration: extractor 2298552
# + VLAD 9625 + FC1 1229056, before the 257-per-class FC2
PARAM_COUNT_BASE_VLAD = 3537233


# -- initialization ---------------------------------------------------------


def _scaled_normal(rng, shape, fan_in, dtype):
    return Tensor(rng.standard_normal(shape) / np.sqrt(fan_in),
                  requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def build_model(num_classes: int, seed: int = 0, variant: str = VARIANT_VLAD,
                dtype=np.float32) -> AfinetModel:
    """Fresh model; offset predictors start at zero so every deformable
    layer begins as a plain 3x3 convolution."""
    if variant not in (VARIANT_VLAD, VARIANT_FLATTEN):
        raise ValueError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(np.random.SeedSequence([0xAF1, int(seed)]))
    blocks = []
    for k, cin, cout in BLOCK_SPECS:
        blocks.append(ConvBlockParams(
            conv_kernel=_scaled_normal(rng, (2 * cout, cin, k, k),
                                       cin * k * k, dtype),
            conv_bias=_zeros((2 * cout,), dtype),
            offset_kernel=_zeros((18, cout, 3, 3), dtype),
            offset_bias=_zeros((18,), dtype),
            deform_kernel=_scaled_normal(rng, (cout, cout, 3, 3),
                                         cout * 9, dtype),
            deform_bias=_zeros((cout,), dtype),
        ))
    if variant == VARIANT_VLAD:
        vlad = VladParams(
            weights=_scaled_normal(rng, (N_CLUSTERS, DESCRIPTOR_DIM),
                                   DESCRIPTOR_DIM, dtype),
            biases=_zeros((N_CLUSTERS,), dtype),
            centers=_scaled_normal(rng, (N_CLUSTERS, DESCRIPTOR_DIM),
                                   DESCRIPTOR_DIM, dtype),
        )
        head_in = VLAD_DIM
    else:
        vlad = None
        head_in = FLAT_DIM
    head = HeadParams(
        fc1_weight=_scaled_normal(rng, (head_in, FEATURE_DIM), head_in,
                                  dtype),
        fc1_bias=_zeros((FEATURE_DIM,), dtype),
        fc2_weight=_scaled_normal(rng, (FEATURE_DIM, num_classes),
                                  FEATURE_DIM, dtype),
        fc2_bias=_zeros((num_classes,), dtype),
    )
    return AfinetModel(ExtractorParams(blocks), vlad, head, num_classes,
                       variant=variant, seed=seed)


# -- forward passes ---------------------------------------------------------

_GRID_CACHE = {}


def _tap_grid(n, h, w, tap_row, tap_col, pad_top, dtype):
    """Constant [1,2,H,W] base sampling grid for one kernel tap."""
    key = (h, w, tap_row, tap_col, pad_top, np.dtype(dtype).name)
    if key not in _GRID_CACHE:
        rows = np.arange(h, dtype=np.float64)[:, None] + tap_row - 1 + pad_top
        cols = np.arange(w, dtype=np.float64)[None, :] + tap_col - 1
        grid = np.stack([np.broadcast_to(rows, (h, w)),
                         np.broadcast_to(cols, (h, w))])[None]
        _GRID_CACHE[key] = grid.astype(dtype)
    return Tensor(_GRID_CACHE[key])


def deformable_conv_with_offsets(x: Tensor, offsets: Tensor, kernel: Tensor,
                                 bias: Tensor) -> Tensor:
    """3x3 deformable convolution given precomputed offsets [N,2*9,H,W].

    Offset channels pair up as (row, col) per tap in row-major tap order.
    Rows see one ring of zero padding before sampling so that zero offsets
    reproduce conv2d's zero-fill vertical boundary exactly; columns wrap.
    """
    n, c, h, w = x.shape
    xp = F.pad_rows_zero(x, 1, 1)
    sampled = []
    for tap in range(9):
        ti, tj = divmod(tap, 3)
        off = slice_channels(offsets, 2 * tap, 2 * tap + 2)
        coords = add(off, _tap_grid(n, h, w, ti, tj, pad_top=1,
                                    dtype=x.dtype))
        sampled.append(reshape(F.bilinear_sample(xp, coords),
                               (n, c, 1, h, w)))
    # channel-major stacking [N, C*9, H, W]: the 1x1 conv then reduces over
    # exactly the same (channel, tap) order as conv2d's im2col, so zero
    # offsets reproduce conv2d bit-for-bit
    stacked = reshape(concat(sampled, axis=2), (n, c * 9, h, w))
    co = kernel.shape[0]
    k1x1 = reshape(kernel, (co, c * 9, 1, 1))
    out = F.conv2d(stacked, k1x1)
    return add(out, reshape(bias, (1, co, 1, 1)))


def deformable_conv(x: Tensor, offset_kernel: Tensor, offset_bias: Tensor,
                    kernel: Tensor, bias: Tensor) -> Tensor:
    """Deformable 3x3 conv with offsets predicted by a 3x3 conv on x."""
    offsets = add(F.conv2d(x, offset_kernel),
                  reshape(offset_bias, (1, offsets_channels(), 1, 1)))
    return deformable_conv_with_offsets(x, offsets, kernel, bias)


def offsets_channels() -> int:
    return 18


def extractor_forward(x: Tensor, params: ExtractorParams) -> Tensor:
    """[N,1,128,128] -> [N,192,8,8] local descriptors."""
    if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (128, 128):
        from .tensor import ShapeMismatchError
        raise ShapeMismatchError("extractor expects [N,1,128,128]", x.shape,
                                 (1, 1, 128, 128))
    h = x
    for blk in params.blocks:
        co = blk.conv_bias.shape[0]
        h = add(F.conv2d(h, blk.conv_kernel),
                reshape(blk.conv_bias, (1, co, 1, 1)))
        h = F.maxout(h)
        h, _ = F.maxpool2d(h)
        h = deformable_conv(h, blk.offset_kernel, blk.offset_bias,
                            blk.deform_kernel, blk.deform_bias)
    return h


def descriptors_from_map(fmap: Tensor) -> Tensor:
    """[N,C,H,W] -> [N, H*W, C] descriptor list."""
    n, c, h, w = fmap.shape
    return reshape(permute(fmap, (0, 2, 3, 1)), (n, h * w, c))


def netvlad_forward(v: Tensor, params: VladParams) -> Tensor:
    """Soft-assign descriptors to centers, aggregate residuals, L2-normalize.

    v: [N, I, C] descriptors. Output: [N, K*C], unit L2 norm.
    """
    if v.shape[2] != params.centers.shape[1]:
        from .tensor import ShapeMismatchError
        raise ShapeMismatchError("descriptor dim vs centers", v.shape,
                                 params.centers.shape)
    scores = add(matmul(v, permute(params.weights, (1, 0))),
                 reshape(params.biases, (1, 1, params.biases.shape[0])))
    assign = F.softmax(scores, axis=2)
    vlad = F.vlad_aggregate(assign, v, params.centers)
    n, k, c = vlad.shape
    return F.l2_normalize(reshape(vlad, (n, k * c)), axis=1)


def head_forward(encoded: Tensor, params: HeadParams):
    """Returns (feature [N,256], logits [N,num_classes]).

    The matching representation is the L2-normalized feature; the
    normalization happens at matching time, not here.
    """
    feature = F.linear(encoded, params.fc1_weight, params.fc1_bias)
    logits = F.linear(feature, params.fc2_weight, params.fc2_bias)
    return feature, logits


def encode(model: AfinetModel, x: Tensor) -> Tensor:
    """Extractor plus aggregation, before the head."""
    fmap = extractor_forward(x, model.extractor)
    if model.variant == VARIANT_VLAD:
        return netvlad_forward(descriptors_from_map(fmap), model.vlad)
    n = fmap.shape[0]
    return reshape(fmap, (n, FLAT_DIM))


def forward(model: AfinetModel, x: Tensor):
    """Full pass: (feature, logits)."""
    return head_forward(encode(model, x), model.head)


def features(model: AfinetModel, x: np.ndarray) -> np.ndarray:
    """Inference-only matching features (not yet L2-normalized)."""
    with no_grad():
        feat, _ = forward(model, Tensor(np.asarray(x, dtype=np.float32)))
    return feat.data


# -- k-means initialization of the VLAD encoder -------------------------------


def kmeans_init(sample_vectors, k: int = N_CLUSTERS, alpha: float = 1.0,
                seed: int = 0, tol: float = 1e-4,
                max_iters: int = 100) -> VladParams:
    """Cluster descriptors (k-means++ seeding, Lloyd refinement) and derive
    the soft-assignment parameters: W = 2*alpha*c, b = -alpha*||c||^2, so
    assignment softmax ranks clusters by -alpha*||v - c||^2.
    """
    x = np.asarray(sample_vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected [n, dim] vectors, got shape {x.shape}")
    distinct = np.unique(x, axis=0)
    if distinct.shape[0] < k:
        raise ValueError(
            f"k-means needs at least {k} distinct vectors, got "
            f"{distinct.shape[0]}")
    rng = np.random.default_rng(np.random.SeedSequence([0x6B6D, int(seed)]))

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(len(x), 1 / len(x))
        centers[i] = x[rng.choice(len(x), p=probs)]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))

    for _ in range(max_iters):
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
        drift = np.linalg.norm(new_centers - centers, axis=1).max()
        centers = new_centers
        if drift < tol:
            break

    c32 = centers.astype(np.float32)
    return VladParams(
        weights=Tensor(2.0 * alpha * c32, requires_grad=True),
        biases=Tensor(-alpha * (c32 ** 2).sum(axis=1), requires_grad=True),
        centers=Tensor(c32, requires_grad=True),
    )


def collect_descriptors(model: AfinetModel, images: np.ndarray,
                        batch: int = 16) -> np.ndarray:
    """Run the extractor over images [M,1,128,128] and pool all local
    descriptors into one [M*64, C] matrix (for kmeans_init)."""
    outs = []
    with no_grad():
        for i in range(0, len(images), batch):
            xb = Tensor(images[i:i + batch].astype(np.float32))
            fmap = extractor_forward(xb, model.extractor)
            outs.append(descriptors_from_map(fmap).data.reshape(
                -1, DESCRIPTOR_DIM))
    return np.concatenate(outs, axis=0)


# -- checkpoints ------------------------------------------------------------

_CKPT_MAGIC = "AFINET-CKPT"


def save_checkpoint(model: AfinetModel, path):
    """Text header (version, variant, shapes) + raw little-endian float32
    parameter buffers in declaration order. Round-trips bit-exactly."""
    lines = [f"{_CKPT_MAGIC} v{model.version}",
             f"variant {model.variant}",
             f"num_classes {model.num_classes}",
             f"seed {model.seed}",
             f"dataset_digest {model.dataset_digest or '-'}"]
    named = model.named_parameters()
    for name, t in named:
        dims = ",".join(str(d) for d in t.shape)
        lines.append(f"param {name} {dims}")
    lines.append("end")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for _, t in named:
            buf = np.ascontiguousarray(t.data, dtype="<f4")
            f.write(buf.tobytes())


def load_checkpoint(path) -> AfinetModel:
    with open(path, "rb") as f:
        header_lines = []
        while True:
            line = f.readline()
            if not line:
                raise CheckpointError(f"{path}: header never terminated")
            text = line.decode("ascii", errors="replace").rstrip("\n")
            header_lines.append(text)
            if text == "end":
                break
        payload = f.read()

    magic = header_lines[0].split()
    if len(magic) != 2 or magic[0] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic line {header_lines[0]!r}")
    version = int(magic[1].lstrip("v"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version {version} unsupported "
            f"(expected {CHECKPOINT_VERSION})")

    meta = {}
    params = []
    for text in header_lines[1:-1]:
        kind, _, rest = text.partition(" ")
        if kind == "param":
            name, _, dims = rest.partition(" ")
            try:
                shape = tuple(int(d) for d in dims.split(","))
            except ValueError:
                raise CheckpointError(
                    f"{path}: field param {name}: bad shape {dims!r}")
            params.append((name, shape))
        else:
            meta[kind] = rest
    for key in ("variant", "num_classes", "seed", "dataset_digest"):
        if key not in meta:
            raise CheckpointError(f"{path}: field {key} missing from header")
    if meta["variant"] not in (VARIANT_VLAD, VARIANT_FLATTEN):
        raise CheckpointError(
            f"{path}: field variant has unknown value {meta['variant']!r}")
    try:
        num_classes = int(meta["num_classes"])
        seed = int(meta["seed"])
    except ValueError as e:
        raise CheckpointError(f"{path}: field num_classes/seed: {e}")

    model = build_model(num_classes, seed=seed, variant=meta["variant"])
    model.dataset_digest = "" if meta["dataset_digest"] == "-" \
        else meta["dataset_digest"]
    expected = model.named_parameters()
    if [n for n, _ in expected] != [n for n, _ in params]:
        raise CheckpointError(
            f"{path}: parameter list does not match the "
            f"{meta['variant']!r} architecture")
    offset = 0
    for (name, tensor), (_, shape) in zip(expected, params):
        if tensor.shape != shape:
            raise CheckpointError(
                f"{path}: field param {name}: shape {shape} != expected "
                f"{tensor.shape}")
        nbytes = int(np.prod(shape)) * 4
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(
                f"{path}: field param {name}: payload truncated")
        offset += nbytes
        tensor.data = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing "
                              "bytes after parameters")
    return model


def model_digest(model: AfinetModel) -> str:
    h = hashlib.sha256()
    for name, t in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()[:16]
