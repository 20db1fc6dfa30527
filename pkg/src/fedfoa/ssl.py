"""Small MLP encoders trained with a contrastive objective plus the FoA regularizer.

Every encoder ends in a linear calibration layer that maps its (architecture
dependent) hidden width to the shared projection dimension ``d``, so feature
matrices from heterogeneous clients are always ``m x d``.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .linalg import as_matrix, procrustes_align

ACTIVATIONS = ("none", "relu")
CKPT_MAGIC = b"FOAM"
CKPT_VERSION = 1

# Desk-scale stand-ins for ResNet-18 / VGG-9 / AlexNet / ResNet-34.
DEFAULT_ZOO = ("mlp-64", "mlp-128-64", "mlp-96", "mlp-128-96-64")


class DivergenceError(FloatingPointError):
    """A gradient or parameter became non-finite during training."""


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(f"bad layer shapes {self.weight.shape}, {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class EncoderModel:
    arch_id: str
    layers: list[Layer]
    calibration: Layer

    def __post_init__(self):
        if self.calibration.activation != "none":
            raise ValueError("calibration layer must be linear")
        dims = [l.in_dim for l in self.all_layers] + [self.calibration.out_dim]
        for a, b in zip(self.all_layers, dims[1:]):
            if a.out_dim != b:
                raise ValueError(f"layer dimensions do not chain: {dims}")
        for p in self.parameters():
            if not np.all(np.isfinite(p)):
                raise DivergenceError("encoder has non-finite parameters")

    @property
    def all_layers(self) -> list[Layer]:
        return [*self.layers, self.calibration]

    @property
    def input_dim(self) -> int:
        return self.all_layers[0].in_dim

    @property
    def projection_dim(self) -> int:
        return self.calibration.out_dim

    @property
    def representation_dim(self) -> int:
        return self.calibration.in_dim

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.all_layers:
            out += [layer.weight, layer.bias]
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "EncoderModel":
        return EncoderModel(
            self.arch_id,
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            Layer(self.calibration.weight.copy(), self.calibration.bias.copy(), "none"),
        )

    def with_parameters(self, params) -> "EncoderModel":
        params = list(params)
        layers = [
            Layer(params[2 * k], params[2 * k + 1], l.activation)
            for k, l in enumerate(self.all_layers)
        ]
        return EncoderModel(self.arch_id, layers[:-1], layers[-1])

    def checksum(self) -> str:
        return hashlib.sha256(save_checkpoint(self)).hexdigest()


def hidden_dims(arch_id: str) -> tuple[int, ...]:
    """Parse ``"mlp-128-64"`` into ``(128, 64)``."""
    kind, *widths = arch_id.split("-")
    if kind != "mlp" or not widths:
        raise ValueError(f"unknown architecture {arch_id!r}")
    try:
        dims = tuple(int(w) for w in widths)
    except ValueError:
        raise ValueError(f"unknown architecture {arch_id!r}") from None
    if any(d <= 0 for d in dims):
        raise ValueError(f"non-positive width in {arch_id!r}")
    return dims


def build_encoder(arch_id: str, input_dim: int, projection_dim: int, rng) -> EncoderModel:
    """He-initialized ReLU MLP plus a linear calibration head to ``projection_dim``."""
    dims = (input_dim, *hidden_dims(arch_id))
    layers = [
        Layer(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)), np.zeros(b), "relu")
        for a, b in zip(dims[:-1], dims[1:])
    ]
    calib = Layer(
        rng.normal(0.0, np.sqrt(1.0 / dims[-1]), size=(dims[-1], projection_dim)),
        np.zeros(projection_dim),
        "none",
    )
    return EncoderModel(arch_id, layers, calib)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)


def forward(model: EncoderModel, batch) -> tuple[np.ndarray, ForwardCache]:
    x = as_matrix(batch, "batch")
    if x.shape[1] != model.input_dim:
        raise ValueError(f"batch width {x.shape[1]} != model input dim {model.input_dim}")
    cache = ForwardCache()
    for layer in model.all_layers:
        cache.inputs.append(x)
        h = x @ layer.weight + layer.bias
        cache.preacts.append(h)
        x = np.maximum(h, 0.0) if layer.activation == "relu" else h
    return x, cache


def represent(model: EncoderModel, batch) -> np.ndarray:
    """Backbone output (input to the calibration layer)."""
    _, cache = forward(model, batch)
    return cache.inputs[-1]


def backward(model: EncoderModel, cache: ForwardCache, upstream) -> list[np.ndarray]:
    """Parameter gradients in ``model.parameters()`` order."""
    g = np.asarray(upstream, dtype=np.float64)
    grads: list[np.ndarray] = []
    for layer, x, h in zip(reversed(model.all_layers), reversed(cache.inputs), reversed(cache.preacts)):
        if layer.activation == "relu":
            g = g * (h > 0)
        grads += [g.sum(axis=0), x.T @ g]
        g = g @ layer.weight.T
    return grads[::-1]


def sgd_step(model: EncoderModel, grads, lr: float) -> EncoderModel:
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient; training diverged")
    return model.with_parameters(p - lr * g for p, g in zip(model.parameters(), grads))


def backward_and_step(model: EncoderModel, cache: ForwardCache, upstream_grad, lr: float) -> EncoderModel:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return sgd_step(model, backward(model, cache, upstream_grad), lr)


# --- losses -----------------------------------------------------------------

@dataclass(frozen=True)
class LossBreakdown:
    contrastive: float
    regularizer: float
    lam: float

    @property
    def total(self) -> float:
        return self.contrastive + self.lam * self.regularizer


def _pair_index(n_rows: int) -> np.ndarray:
    # Row 2k pairs with 2k+1.
    return np.arange(n_rows) ^ 1


def contrastive_loss(z_views, tau: float) -> tuple[float, np.ndarray]:
    """NT-Xent over interleaved views; mean over all 2m anchors.

    Rows ``2k`` and ``2k+1`` are the two views of sample ``k``. Returns the
    loss and its gradient with respect to ``z_views``.
    """
    z = as_matrix(z_views, "z_views")
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = z.shape[0]
    if n < 2 or n % 2:
        raise ValueError(f"need an even number (>= 2) of view rows, got {n}")
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding row; cosine similarity undefined")
    zn = z / norms[:, None]
    s = zn @ zn.T / tau
    np.fill_diagonal(s, -np.inf)
    pos = _pair_index(n)
    rows = np.arange(n)

    smax = s.max(axis=1, keepdims=True)
    e = np.exp(s - smax)
    denom = e.sum(axis=1)
    log_denom = np.log(denom) + smax[:, 0]
    loss = float(np.mean(log_denom - s[rows, pos]))

    g_s = e / denom[:, None]
    g_s[rows, pos] -= 1.0
    g_s /= n
    g_zn = (g_s + g_s.T) @ zn / tau
    g_z = (g_zn - zn * np.einsum("ij,ij->i", zn, g_zn)[:, None]) / norms[:, None]
    return loss, g_z


def foa_regularizer(z, r_bar_peer, squared: bool = True) -> tuple[float, np.ndarray]:
    """Recreation loss of ``z`` from a peer's correlation matrix.

    ``Q*`` is the Procrustes optimum and is treated as a constant when
    differentiating. With ``squared`` the loss is ``||z - Q* R||_F**2``,
    otherwise the plain norm.
    """
    z = as_matrix(z, "z")
    q_star, residual = procrustes_align(z, r_bar_peer)
    diff = z - q_star @ np.asarray(r_bar_peer, dtype=np.float64)
    if squared:
        return residual * residual, 2.0 * diff
    if residual == 0.0:
        return 0.0, np.zeros_like(z)
    return residual, diff / residual


# --- verification -----------------------------------------------------------

def numeric_gradients(model: EncoderModel, batch, loss_fn, step: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``loss_fn(forward(model, batch)[0])[0]``."""
    params = [p.copy() for p in model.parameters()]
    out = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = loss_fn(forward(model.with_parameters(params), batch)[0])[0]
            p[idx] = orig - step
            down = loss_fn(forward(model.with_parameters(params), batch)[0])[0]
            p[idx] = orig
            g[idx] = (up - down) / (2 * step)
        out.append(g)
    return out


def gradient_check(model: EncoderModel, batch, loss_fn, step: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` maps the projection output ``z`` to ``(loss, dloss/dz)``. The
    error for each parameter array is ``||g_a - g_n|| / max(||g_a||, ||g_n||)``
    and the maximum over arrays is returned.
    """
    if model.num_parameters() > 10_000:
        raise ValueError("gradient_check is meant for models with <= 1e4 parameters")
    z, cache = forward(model, batch)
    _, gz = loss_fn(z)
    analytic = backward(model, cache, gz)
    numeric = numeric_gradients(model, batch, loss_fn, step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(model: EncoderModel) -> bytes:
    """Self-describing little-endian checkpoint.

    Layout: magic ``FOAM``, u16 version, u16 arch-id length, arch id (utf-8),
    u32 layer count, then per layer (u32 in, u32 out, u8 activation), then all
    parameters as f64 in declaration order (weight row-major, then bias). The
    calibration layer is the last layer.
    """
    buf = io.BytesIO()
    arch = model.arch_id.encode("utf-8")
    buf.write(struct.pack("<4sHH", CKPT_MAGIC, CKPT_VERSION, len(arch)))
    buf.write(arch)
    layers = model.all_layers
    buf.write(struct.pack("<I", len(layers)))
    for l in layers:
        buf.write(struct.pack("<IIB", l.in_dim, l.out_dim, ACTIVATIONS.index(l.activation)))
    for p in model.parameters():
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def load_checkpoint(payload: bytes) -> EncoderModel:
    view = memoryview(payload)
    try:
        magic, version, alen = struct.unpack_from("<4sHH", view, 0)
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint (magic {magic!r})")
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 8
        arch_id = bytes(view[off:off + alen]).decode("utf-8")
        off += alen
        (count,) = struct.unpack_from("<I", view, off)
        off += 4
        specs = []
        for _ in range(count):
            specs.append(struct.unpack_from("<IIB", view, off))
            off += 9
        layers = []
        for in_dim, out_dim, act in specs:
            w = np.frombuffer(payload, "<f8", in_dim * out_dim, off).reshape(in_dim, out_dim)
            off += 8 * in_dim * out_dim
            b = np.frombuffer(payload, "<f8", out_dim, off)
            off += 8 * out_dim
            layers.append(Layer(w.astype(np.float64), b.astype(np.float64), ACTIVATIONS[act]))
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint: {exc}") from None
    if off != len(payload):
        raise ValueError(f"checkpoint has {len(payload) - off} trailing bytes")
    return EncoderModel(arch_id, layers[:-1], layers[-1])

