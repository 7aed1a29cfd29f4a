"""Character-image track: IDX file handling, group partitioning, PCA
stats per client, and a conditional CNN with hand-written backprop.

Clients hold images from exactly one of three groups (numbers,
lowercase, uppercase).  Their stats vector is built from principal
component loadings of rows [flattened image | one-hot label], so the
vector carries the group identity that the conditional CNN exploits.

A procedural glyph generator provides a stand-in dataset with the same
group structure and deliberately confusable shapes (z/Z/2, o/O/0, s/S/5)
so the whole pipeline runs without the real IDX files.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericError, ParamSet, ShapeError, relu
from .models import ModelAdapter
from .stats import DummyGlobalPC, DummyZeros, LocalStats, PrincipalComponents, \
    client_stats, one_hot
from .synthdata import SeededRng, derive_stream

__all__ = [
    "FormatError",
    "LengthError",
    "MissingInputError",
    "IdxTensor",
    "EmnistClient",
    "CHAR_ORDER",
    "GROUPS",
    "GROUP_RANGES",
    "char_to_label",
    "label_to_char",
    "group_of_label",
    "parse_idx",
    "serialize_idx",
    "load_idx_file",
    "load_dataset",
    "downsample_images",
    "partition_clients",
    "client_pcs",
    "global_pc_vector",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2",
    "maxpool2_backward",
    "softmax_xent",
    "cnn_layout",
    "CnnAdapter",
    "cnn_forward",
    "cnn_backward",
    "render_glyph",
    "make_fallback_pool",
    "SetupResult",
    "run_comparison",
    "confusion_report",
    "component_sweep",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# byclass label order: digits, then uppercase, then lowercase.
CHAR_ORDER = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"
GROUPS = ("numbers", "lowercase", "uppercase")
GROUP_RANGES = {"numbers": (0, 10), "uppercase": (10, 36), "lowercase": (36, 62)}

_PARTITION_LABEL = 0x9A27
_GLYPH_LABEL = 0x617F


class FormatError(ValueError):
    """Byte stream is not a recognized IDX file."""


class LengthError(ValueError):
    """IDX payload shorter or longer than its header promises."""


class MissingInputError(FileNotFoundError):
    """A required dataset file is absent."""


def char_to_label(ch: str) -> int:
    idx = CHAR_ORDER.find(ch)
    if idx < 0:
        raise ValueError(f"no class for character {ch!r}")
    return idx


def label_to_char(label: int) -> str:
    return CHAR_ORDER[label]


def group_of_label(label: int) -> str:
    for group, (lo, hi) in GROUP_RANGES.items():
        if lo <= label < hi:
            return group
    raise ValueError(f"label {label} outside 0..61")


# --- IDX binary format --------------------------------------------------------

@dataclass
class IdxTensor:
    dims: tuple
    data: np.ndarray


def parse_idx(raw: bytes) -> IdxTensor:
    """Decode an IDX byte stream (gzip-wrapped streams are unwrapped)."""
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise LengthError(f"stream of {len(raw)} bytes is shorter than a magic")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise FormatError(f"bad magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthError(
            f"truncated header: {len(raw)} bytes, need {header} for dims")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = raw[header:]
    if len(payload) < expected:
        raise LengthError(
            f"truncated payload: {len(payload)} bytes, header promises {expected}")
    if len(payload) > expected:
        raise LengthError(
            f"trailing bytes: {len(payload)} payload bytes, header promises {expected}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    return IdxTensor(dims=tuple(int(d) for d in dims), data=data)


def serialize_idx(tensor) -> bytes:
    """Inverse of parse_idx for uint8 tensors of rank 1 or 3."""
    data = tensor.data if isinstance(tensor, IdxTensor) else np.asarray(tensor)
    if data.dtype != np.uint8:
        raise FormatError(f"IDX payload must be uint8, got {data.dtype}")
    if data.ndim == 3:
        magic = IMAGE_MAGIC
    elif data.ndim == 1:
        magic = LABEL_MAGIC
    else:
        raise FormatError(f"IDX rank must be 1 or 3, got {data.ndim}")
    header = struct.pack(f">I{data.ndim}I", magic, *data.shape)
    return header + data.tobytes()


def load_idx_file(path) -> IdxTensor:
    try:
        with open(path, "rb") as fh:
            return parse_idx(fh.read())
    except FileNotFoundError as exc:
        raise MissingInputError(str(path)) from exc


def load_dataset(images_path, labels_path):
    """Load paired image/label IDX files; returns (uint8 images, labels)."""
    images = load_idx_file(images_path)
    labels = load_idx_file(labels_path)
    if images.data.ndim != 3:
        raise FormatError(f"{images_path}: expected an image tensor")
    if labels.data.ndim != 1:
        raise FormatError(f"{labels_path}: expected a label vector")
    if images.dims[0] != labels.dims[0]:
        raise FormatError(
            f"image count {images.dims[0]} != label count {labels.dims[0]}")
    return images.data, labels.data


def downsample_images(images: np.ndarray, factor: int = 2) -> np.ndarray:
    """Block-mean pooling; rows/cols must divide evenly by the factor."""
    n, h, w = images.shape
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} images do not tile by factor {factor}")
    blocks = images.reshape(n, h // factor, factor, w // factor, factor)
    return blocks.astype(np.float64).mean(axis=(2, 4))


# --- client partitioning ------------------------------------------------------

@dataclass
class EmnistClient:
    """One client's shard: flattened [0,1] images from a single group."""
    client_id: int
    group: str
    images: np.ndarray
    labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    stats: LocalStats | None = None
    pc_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        lo, hi = GROUP_RANGES[self.group]
        for arr in (self.labels, self.test_labels):
            if arr.size and (arr.min() < lo or arr.max() >= hi):
                raise ValueError(
                    f"client {self.client_id}: labels escape group "
                    f"{self.group!r} range [{lo},{hi})")

    task = "emnist"
    label_classes = 62

    @property
    def cluster_id(self) -> int:
        return GROUPS.index(self.group)

    @property
    def X_train(self) -> np.ndarray:
        return self.images

    @property
    def y_train(self) -> np.ndarray:
        return self.labels

    @property
    def X_test(self) -> np.ndarray:
        return self.test_images

    @property
    def y_test(self) -> np.ndarray:
        return self.test_labels

    @property
    def train_features(self) -> np.ndarray:
        return self.images

    @property
    def train_labels(self) -> np.ndarray:
        return self.labels

    @property
    def n_train(self) -> int:
        return self.labels.shape[0]


def _scaled_flat(images: np.ndarray) -> np.ndarray:
    flat = images.reshape(images.shape[0], -1)
    if np.issubdtype(flat.dtype, np.integer):
        return flat.astype(np.float64) / 255.0
    return flat.astype(np.float64)


def partition_clients(images, labels, clients_per_group: int,
                      points_per_client: int, rng,
                      test_per_client: int | None = None) -> list:
    """Carve the pool into group-pure clients, round-robin over groups.

    Client i belongs to GROUPS[i % 3].  Within a group, train and test
    rows are drawn without replacement from one permutation, so clients
    of the same group never share a sample.
    """
    if test_per_client is None:
        test_per_client = max(points_per_client // 5, 1)
    labels = np.asarray(labels).astype(np.int64)
    flat = _scaled_flat(np.asarray(images))
    need = clients_per_group * (points_per_client + test_per_client)
    pools = {}
    for group, (lo, hi) in GROUP_RANGES.items():
        pool = np.flatnonzero((labels >= lo) & (labels < hi))
        if pool.size < need:
            raise ValueError(
                f"group {group!r} has {pool.size} samples, "
                f"{need} needed for {clients_per_group} clients")
        pools[group] = pool[rng.permutation(pool.size)]
        pools[group + "/next"] = 0

    clients = []
    for i in range(3 * clients_per_group):
        group = GROUPS[i % 3]
        start = pools[group + "/next"]
        take = pools[group][start:start + points_per_client + test_per_client]
        pools[group + "/next"] = start + take.size
        train, test = take[:points_per_client], take[points_per_client:]
        clients.append(EmnistClient(
            client_id=i, group=group,
            images=flat[train], labels=labels[train],
            test_images=flat[test], test_labels=labels[test]))
    return clients


# --- per-client principal-component stats -------------------------------------

def client_pcs(client: EmnistClient, nc: int, dummy: str = "zeros",
               global_mu: np.ndarray | None = None) -> LocalStats:
    """Stats vector from the top-nc loadings of [image | one-hot] rows.

    nc=0 selects the dummy recipe instead: zeros, or the pooled
    all-client loading when ``dummy`` is "global_pc".  Decompositions
    are cached on the client, so sweeping nc costs one eigensolve.
    """
    if nc < 0:
        raise ValueError("nc must be >= 0")
    width = client.images.shape[1] + 62
    if nc == 0:
        if dummy == "zeros":
            return client_stats(client, DummyZeros(width))
        if dummy == "global_pc":
            if global_mu is None:
                raise ValueError("global_pc dummy needs the pooled loading")
            return client_stats(client, DummyGlobalPC(global_mu))
        raise ValueError(f"unknown dummy recipe {dummy!r}")
    cached = [k for k in client.pc_cache if k >= nc]
    if cached:
        stats = client.pc_cache[min(cached)]
        mu = stats.mu.reshape(-1, width)[:nc].ravel().copy()
        return LocalStats(mu=mu, descriptor=PrincipalComponents(nc))
    stats = client_stats(client, PrincipalComponents(nc))
    client.pc_cache[nc] = stats
    return stats


def global_pc_vector(clients, nc: int = 1) -> np.ndarray:
    """Pooled loading over every client's rows, for the dummy control.

    Uses the same uncentered decomposition as the per-client statistics so
    the control differs only in which rows it sees.
    """
    rows = np.vstack([
        np.hstack([c.images, one_hot(c.labels, 62)]) for c in clients])
    from .stats import principal_components
    loadings, _ = principal_components(rows, nc, center=False)
    return loadings.ravel()


# --- convolution / pooling primitives -----------------------------------------

def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))


def conv2d_forward(x: np.ndarray, kernels: np.ndarray,
                   bias: np.ndarray) -> np.ndarray:
    """Valid cross-correlation, stride 1.  x: (B,C,H,W), kernels (F,C,kh,kw)."""
    single = x.ndim == 3
    if single:
        x = x[None]
    f, c, kh, kw = kernels.shape
    if x.shape[1] != c:
        raise ShapeError(f"input has {x.shape[1]} channels, kernels expect {c}")
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeError(f"kernel {kh}x{kw} exceeds input {x.shape[2]}x{x.shape[3]}")
    out = np.einsum("bchwij,fcij->bfhw", _windows(x, kh, kw), kernels,
                    optimize=True) + bias[:, None, None]
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, kernels: np.ndarray, dout: np.ndarray):
    """Gradients (dx, dkernels, dbias) of the valid cross-correlation."""
    single = x.ndim == 3
    if single:
        x, dout = x[None], dout[None]
    f, c, kh, kw = kernels.shape
    db = dout.sum(axis=(0, 2, 3))
    dk = np.einsum("bchwij,bfhw->fcij", _windows(x, kh, kw), dout, optimize=True)
    # dx is the full correlation of dout with the 180-degree-rotated kernels.
    padded = np.pad(dout, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    dx = np.einsum("bfhwij,fcij->bchw", _windows(padded, kh, kw),
                   kernels[:, :, ::-1, ::-1], optimize=True)
    if single:
        return dx[0], dk, db
    return dx, dk, db


def maxpool2(x: np.ndarray):
    """2x2 stride-2 max pool; an odd trailing row/col is dropped.

    Returns (pooled, argmax) where argmax holds each window's winning
    position in row-major window order; ties go to the lowest index.
    """
    b, c, h, w = x.shape
    ht, wt = h - h % 2, w - w % 2
    view = x[:, :, :ht, :wt].reshape(b, c, ht // 2, 2, wt // 2, 2)
    view = view.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ht // 2, wt // 2, 4)
    idx = view.argmax(axis=-1)
    pooled = np.take_along_axis(view, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def maxpool2_backward(dpool: np.ndarray, idx: np.ndarray, input_shape):
    """Route each pooled gradient back to its stored argmax position."""
    b, c, h, w = input_shape
    ht, wt = h - h % 2, w - w % 2
    scatter = np.zeros((b, c, ht // 2, wt // 2, 4))
    np.put_along_axis(scatter, idx[..., None], dpool[..., None], axis=-1)
    scatter = scatter.reshape(b, c, ht // 2, wt // 2, 2, 2)
    scatter = scatter.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ht, wt)
    dx = np.zeros(input_shape)
    dx[:, :, :ht, :wt] = scatter
    return dx


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over rows and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = float(np.mean(logsum[:, 0] - z[np.arange(n), labels]))
    p = np.exp(z - logsum)
    p[np.arange(n), labels] -= 1.0
    return loss, p / n


# --- conditional CNN ----------------------------------------------------------

MU_GAIN = 20.0


def cnn_layout(side: int, channels=(8, 16, 32), ksize: int = 3) -> dict:
    """Spatial plan for conv1-pool-conv2-pool-conv3 on side x side input.

    A pool is skipped when it would leave the next conv without room
    (fewer than ksize pixels), which is what happens after conv2 on
    14x14 inputs; 28x28 keeps both pools.
    """
    h = side - (ksize - 1)
    if h < 1:
        raise ShapeError(f"{side}x{side} input too small for {ksize}x{ksize} conv")
    pools = []
    for remaining in (2, 1):
        pooled = h // 2
        needed = ksize + (ksize - 1) * (remaining - 1)
        if pooled >= needed:
            pools.append(True)
            h = pooled
        else:
            pools.append(False)
        h = h - (ksize - 1)
        if h < 1:
            raise ShapeError(f"{side}x{side} input too small for the conv stack")
    return {"side": side, "channels": tuple(channels), "ksize": ksize,
            "pools": tuple(pools), "flat": channels[2] * h * h, "out_side": h}


def _cnn_param_entries(layout: dict, mu_len: int, rng) -> list:
    c1, c2, c3 = layout["channels"]
    k = layout["ksize"]
    fan_fc = layout["flat"] + mu_len
    def he(shape, fan):
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan)
    return [
        ("c1k", he((c1, 1, k, k), k * k)), ("c1b", np.zeros(c1)),
        ("c2k", he((c2, c1, k, k), c1 * k * k)), ("c2b", np.zeros(c2)),
        ("c3k", he((c3, c2, k, k), c2 * k * k)), ("c3b", np.zeros(c3)),
        ("fck", rng.standard_normal((fan_fc, 62)) * np.sqrt(1.0 / fan_fc)),
        ("fcb", np.zeros(62)),
    ]


def cnn_forward(ps: ParamSet, layout: dict, X: np.ndarray, mu: np.ndarray):
    """Batched forward pass; X rows are flattened images.

    Returns (logits, cache); the cache carries every intermediate the
    backward pass needs.
    """
    side = layout["side"]
    b = X.shape[0]
    if X.shape[1] != side * side:
        raise ShapeError(f"rows of width {X.shape[1]} are not {side}x{side} images")
    a = X.reshape(b, 1, side, side)
    # The stats block is normalized to norm MU_GAIN regardless of how many
    # loadings it concatenates; the flattened conv block runs a norm near 1
    # per row, and the head only keys on the stats within a few rounds when
    # their block is a good deal larger. Zero dummies stay zero.
    mu = np.asarray(mu, dtype=np.float64)
    norm = float(np.linalg.norm(mu))
    if norm > 0.0:
        mu = mu * (MU_GAIN / norm)
    cache = {"x0": a, "mu": mu}
    for i, pool in enumerate((layout["pools"][0], layout["pools"][1], None)):
        name = f"c{i + 1}"
        z = conv2d_forward(a, ps.param(name + "k"), ps.param(name + "b"))
        r = relu(z)
        cache[name + "_in"] = a
        cache[name + "_z"] = z
        if pool:
            a, idx = maxpool2(r)
            cache[name + "_pool"] = (idx, r.shape)
        else:
            a = r
    flat = a.reshape(b, -1)
    feats = np.hstack([flat, np.tile(mu, (b, 1))])
    cache["conv_out_shape"] = a.shape
    cache["feats"] = feats
    logits = feats @ ps.param("fck") + ps.param("fcb")
    return logits, cache


def cnn_backward(ps: ParamSet, layout: dict, cache: dict,
                 dlogits: np.ndarray) -> None:
    """Write exact parameter gradients into ``ps`` (mu gets none)."""
    feats = cache["feats"]
    ps.set_grad("fck", feats.T @ dlogits)
    ps.set_grad("fcb", dlogits.sum(axis=0))
    dfeats = dlogits @ ps.param("fck").T
    flat_len = layout["flat"]
    da = dfeats[:, :flat_len].reshape(cache["conv_out_shape"])
    for i, pool in ((3, None), (2, layout["pools"][1]), (1, layout["pools"][0])):
        name = f"c{i}"
        if pool:
            idx, r_shape = cache[name + "_pool"]
            da = maxpool2_backward(da, idx, r_shape)
        dz = da * (cache[name + "_z"] > 0)
        da, dk, db = conv2d_backward(cache[name + "_in"], ps.param(name + "k"), dz)
        ps.set_grad(name + "k", dk)
        ps.set_grad(name + "b", db)


class CnnAdapter(ModelAdapter):
    """Drives the conditional CNN through the federated round loop."""

    name = "cnn"

    def __init__(self, channels=(8, 16, 32), ksize: int = 3):
        self.channels = tuple(channels)
        self.ksize = ksize
        self.layout = None

    def init_params(self, x_width: int, mu_len: int, rng) -> ParamSet:
        side = int(round(np.sqrt(x_width)))
        if side * side != x_width:
            raise ShapeError(f"row width {x_width} is not a square image")
        self.layout = cnn_layout(side, self.channels, self.ksize)
        return ParamSet(_cnn_param_entries(self.layout, mu_len, rng))

    def loss_grad(self, ps, X, y, mu, task):
        logits, cache = cnn_forward(ps, self.layout, X, mu)
        loss, dlogits = softmax_xent(logits, y)
        cnn_backward(ps, self.layout, cache, dlogits)
        return loss

    def predict(self, ps, X, mu):
        logits, _ = cnn_forward(ps, self.layout, X, mu)
        return logits


# --- procedural glyph fallback ------------------------------------------------

# Box segments, y grows upward: a top, g middle, d bottom; f/e left
# verticals, b/c right verticals.
_A = ((0.2, 0.9), (0.8, 0.9))
_B = ((0.8, 0.9), (0.8, 0.5))
_C = ((0.8, 0.5), (0.8, 0.1))
_D = ((0.2, 0.1), (0.8, 0.1))
_E = ((0.2, 0.5), (0.2, 0.1))
_F = ((0.2, 0.9), (0.2, 0.5))
_G = ((0.2, 0.5), (0.8, 0.5))
_MID = ((0.5, 0.9), (0.5, 0.1))

_SEGMENTS = {
    "0": (_A, _B, _C, _D, _E, _F),
    "1": (_MID, ((0.35, 0.74), (0.5, 0.9))),
    "2": (_A, _B, _G, _E, _D),
    "3": (_A, _B, _G, _C, _D),
    "4": (_F, _G, _B, _C),
    "5": (_A, _F, _G, _C, _D),
    "6": (_A, _F, _G, _E, _D, _C),
    "7": (_A, _B, _C),
    "8": (_A, _B, _C, _D, _E, _F, _G),
    "9": (_A, _B, _F, _G, _C, _D),
    "A": (_A, _B, _C, _E, _F, _G),
    "B": (_A, _B, _C, _D, _E, _F, _G, _MID),
    "C": (_A, _F, _E, _D),
    "D": (_A, _B, _C, _D, _MID),
    "E": (_A, _F, _G, _E, _D),
    "F": (_A, _F, _G, _E),
    "G": (_A, _F, _E, _D, _C, ((0.5, 0.5), (0.8, 0.5))),
    "H": (_F, _E, _B, _C, _G),
    "I": (_MID, ((0.35, 0.9), (0.65, 0.9)), ((0.35, 0.1), (0.65, 0.1))),
    "J": (((0.4, 0.9), (0.8, 0.9)), _B, _C, _D, ((0.2, 0.3), (0.2, 0.1))),
    "K": (_F, _E, ((0.2, 0.5), (0.8, 0.9)), ((0.2, 0.5), (0.8, 0.1))),
    "L": (_F, _E, _D),
    "M": (_F, _E, _B, _C, ((0.2, 0.9), (0.5, 0.5)), ((0.5, 0.5), (0.8, 0.9))),
    "N": (_F, _E, _B, _C, ((0.2, 0.9), (0.8, 0.1))),
    "O": (_A, _B, _C, _D, _E, _F),
    "P": (_A, _F, _E, _B, _G),
    "Q": (_A, _B, _C, _D, _E, _F, ((0.6, 0.35), (0.85, 0.05))),
    "R": (_A, _F, _E, _B, _G, ((0.5, 0.5), (0.8, 0.1))),
    "S": (_A, _F, _G, _C, _D),
    "T": (_A, _MID),
    "U": (_F, _E, _D, _C, _B),
    "V": (((0.2, 0.9), (0.5, 0.1)), ((0.5, 0.1), (0.8, 0.9))),
    "W": (((0.2, 0.9), (0.35, 0.1)), ((0.35, 0.1), (0.5, 0.6)),
          ((0.5, 0.6), (0.65, 0.1)), ((0.65, 0.1), (0.8, 0.9))),
    "X": (((0.2, 0.9), (0.8, 0.1)), ((0.2, 0.1), (0.8, 0.9))),
    "Y": (((0.2, 0.9), (0.5, 0.5)), ((0.8, 0.9), (0.5, 0.5)),
          ((0.5, 0.5), (0.5, 0.1))),
    "Z": (_A, ((0.8, 0.9), (0.2, 0.1)), _D),
}

_LOWER_SCALE = 0.62
# Digits get a narrow, slanted variant of the box font.  Each group then has
# its own aggregate shape (like real handwriting does), so group identity is
# visible to per-client statistics, while 1/I and 2/Z stay confusable in form.
_DIGIT_NARROW = 0.55
_DIGIT_SLANT = 0.28


def _char_segments(ch: str):
    """Segment list for any of the 62 classes; lowercase letters are the
    uppercase shapes shrunk toward the baseline (an x-height look), which
    makes pairs like z/Z and o/O/0 confusable on purpose."""
    if ch.isdigit():
        segs = []
        for seg in _SEGMENTS[ch]:
            pts = np.array(seg, dtype=np.float64)
            x = 0.5 + _DIGIT_NARROW * (pts[:, 0] - 0.5) \
                + _DIGIT_SLANT * (pts[:, 1] - 0.5)
            segs.append(np.stack([x, pts[:, 1]], axis=1))
        return segs
    if ch in _SEGMENTS:
        return [np.array(s, dtype=np.float64) for s in _SEGMENTS[ch]]
    upper = ch.upper()
    if upper not in _SEGMENTS:
        raise ValueError(f"no glyph for {ch!r}")
    segs = []
    for (x0, y0), (x1, y1) in _SEGMENTS[upper]:
        segs.append(np.array([
            [0.5 + _LOWER_SCALE * (x0 - 0.5), 0.08 + _LOWER_SCALE * y0],
            [0.5 + _LOWER_SCALE * (x1 - 0.5), 0.08 + _LOWER_SCALE * y1],
        ]))
    if ch == "i":
        segs.append(np.array([[0.5, 0.78], [0.5, 0.83]]))
    if ch == "j":
        segs.append(np.array([[0.65, 0.78], [0.65, 0.83]]))
    return segs


def render_glyph(ch: str, rng, size: int = 14, stroke: float | None = None,
                 noise: float = 0.13, jitter: bool = True) -> np.ndarray:
    """Rasterize one glyph with a random affine wobble, stroke width and noise.

    Jitter is deliberately generous: with a clean font, 500-point
    single-client models saturate and there is nothing left for pooled
    training to win.
    """
    segs = _char_segments(ch)
    if jitter:
        theta = float(rng.uniform(-0.35, 0.35, ()))
        scale = float(rng.uniform(0.72, 1.18, ()))
        shift = rng.uniform(-0.14, 0.14, (2,))
        if stroke is None:
            stroke = float(rng.uniform(0.035, 0.08, ()))
    else:
        theta, scale, shift = 0.0, 1.0, np.zeros(2)
    if stroke is None:
        stroke = 0.055
    rot = scale * np.array([[np.cos(theta), -np.sin(theta)],
                            [np.sin(theta), np.cos(theta)]])
    center = np.array([0.5, 0.5])

    axis = (np.arange(size) + 0.5) / size
    px = np.stack(np.meshgrid(axis, 1.0 - axis), axis=-1).reshape(-1, 2)
    intensity = np.zeros(px.shape[0])
    for seg in segs:
        p0, p1 = (seg - center) @ rot.T + center + shift
        d = p1 - p0
        denom = float(d @ d)
        if denom < 1e-12:
            t = np.zeros(px.shape[0])
        else:
            t = np.clip((px - p0) @ d / denom, 0.0, 1.0)
        closest = p0 + t[:, None] * d
        dist2 = ((px - closest) ** 2).sum(axis=1)
        intensity = np.maximum(intensity, np.exp(-dist2 / (stroke * stroke)))
    img = intensity.reshape(size, size)
    if noise > 0:
        img = img + noise * rng.standard_normal((size, size))
    return np.clip(img, 0.0, 1.0)


def make_fallback_pool(per_class: int, size: int = 14, seed: int = 0):
    """Balanced synthetic pool: per_class rendered glyphs for each of the
    62 classes, each normalized to unit ink (L2).  Deterministic in the seed.

    Without the normalization the full-box uppercase glyphs carry several
    times the pixel energy of digits and lowercase, and shared training
    collapses toward the brightest group.
    """
    images = np.empty((62 * per_class, size, size))
    labels = np.empty(62 * per_class, dtype=np.int64)
    row = 0
    for label, ch in enumerate(CHAR_ORDER):
        rng = derive_stream(seed, [_GLYPH_LABEL, label])
        for _ in range(per_class):
            images[row] = render_glyph(ch, rng, size=size)
            labels[row] = label
            row += 1
    flat = images.reshape(images.shape[0], -1)
    flat /= np.linalg.norm(flat, axis=1, keepdims=True)
    return images, labels


# --- experiment runners ---------------------------------------------------------

@dataclass
class SetupResult:
    """A trained set-up: its accuracy report plus what predict needs."""
    name: str
    accuracy: float
    adapter: ModelAdapter
    params: object              # ParamSet, or {client_id: ParamSet}
    stats: dict                 # client_id -> LocalStats used at train time
    result: object = None


def _assign_stats(clients, stats_map):
    for c in clients:
        c.stats = stats_map[c.client_id]


def _conditional_stats(clients, nc, dummy="zeros", global_mu=None) -> dict:
    return {c.client_id: client_pcs(c, nc, dummy=dummy, global_mu=global_mu)
            for c in clients}


def run_comparison(clients, fedcfg, nc: int = 1) -> dict:
    """Train the four set-ups at one seed: conditional CNN, federated
    unconditional (dummy stats), per-group federated, and per-client
    local.  Returns {name: SetupResult}."""
    from .federation import run

    mu_width = nc * (clients[0].images.shape[1] + 62)
    dummy_map = {c.client_id: client_stats(c, DummyZeros(mu_width))
                 for c in clients}
    out = {}

    cond_map = _conditional_stats(clients, nc)
    _assign_stats(clients, cond_map)
    adapter = CnnAdapter()
    res = run(fedcfg, shards=clients, adapter=adapter)
    out["conditional"] = SetupResult("conditional", res.final_report.global_mean,
                                     adapter, res.params, cond_map, res)

    _assign_stats(clients, dummy_map)
    adapter = CnnAdapter()
    res = run(fedcfg, shards=clients, adapter=adapter)
    out["global"] = SetupResult("global", res.final_report.global_mean,
                                adapter, res.params, dummy_map, res)

    _assign_stats(clients, dummy_map)
    adapter = CnnAdapter()
    accs, params = [], {}
    for group in GROUPS:
        members = [c for c in clients if c.group == group]
        res = run(fedcfg, shards=members, adapter=adapter)
        accs.extend(res.final_report.per_client_metric)
        for c in members:
            params[c.client_id] = res.params
    out["cluster"] = SetupResult("cluster", float(np.mean(accs)),
                                 adapter, params, dummy_map)

    _assign_stats(clients, dummy_map)
    adapter = CnnAdapter()
    accs, params = [], {}
    for c in clients:
        res = run(fedcfg, shards=[c], adapter=adapter)
        accs.append(res.final_report.global_mean)
        params[c.client_id] = res.params
    out["client"] = SetupResult("client", float(np.mean(accs)),
                                adapter, params, dummy_map)
    return out


def confusion_report(setup: SetupResult, clients, chars=None) -> list:
    """Per-character test accuracy rows [(char, accuracy, count)]."""
    hits = np.zeros(62)
    counts = np.zeros(62)
    for c in sorted(clients, key=lambda s: s.client_id):
        ps = setup.params[c.client_id] if isinstance(setup.params, dict) \
            else setup.params
        logits = setup.adapter.predict(ps, c.test_images, setup.stats[c.client_id].mu)
        pred = np.argmax(logits, axis=1)
        for lab, p in zip(c.test_labels, pred):
            counts[lab] += 1
            hits[lab] += float(p == lab)
    chars = list(chars) if chars is not None else list(CHAR_ORDER)
    rows = []
    for ch in chars:
        lab = char_to_label(ch)
        acc = hits[lab] / counts[lab] if counts[lab] else float("nan")
        rows.append((ch, acc, int(counts[lab])))
    return rows


def component_sweep(fedcfg, nc_values, clients) -> list:
    """One conditional run per nc at a shared seed; nc=0 runs both dummy
    controls (zeros and pooled global loading).  Rows:
    (nc, variant, accuracy)."""
    from .federation import run

    rows = []
    pooled = None
    top = max(nc_values)
    if top > 0:
        for c in clients:
            client_pcs(c, top)  # one eigensolve serves every nc below it
    for nc in nc_values:
        if nc == 0:
            width = clients[0].images.shape[1] + 62
            if pooled is None:
                pooled = global_pc_vector(clients, 1)
            for variant, stats_map in (
                    ("zeros", {c.client_id: client_stats(c, DummyZeros(width))
                               for c in clients}),
                    ("global_pc", _conditional_stats(clients, 0, "global_pc",
                                                     pooled))):
                _assign_stats(clients, stats_map)
                res = run(fedcfg, shards=clients, adapter=CnnAdapter())
                rows.append((0, variant, res.final_report.global_mean))
        else:
            _assign_stats(clients, _conditional_stats(clients, nc))
            res = run(fedcfg, shards=clients, adapter=CnnAdapter())
            rows.append((nc, "pc", res.final_report.global_mean))
    return rows
