"""Time-conditioned deformation fields and the canonical color network.

All networks are plain ReLU MLPs evaluated and differentiated by hand in
numpy. Weights are stored as ``(fan_in, fan_out)`` matrices so a batch of
row vectors maps through ``x @ W + b``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import GaussianSet, InvalidArgument, normalize_quaternions

SCALE_FLOOR = 1e-6
CHECKPOINT_MAGIC = b"SFM1"
CHECKPOINT_VERSION = 1
ROLE_FORWARD, ROLE_BACKWARD, ROLE_COLOR = 0, 1, 2
_ACTIVATIONS = {"none": 0, "sigmoid": 1}


def positional_encode(x, L: int) -> np.ndarray:
    """Per component: ``sin(2^k pi x), cos(2^k pi x)`` for ``k = 0..L-1``.

    Input ``(..., d)`` maps to ``(..., 2 L d)``, grouped component-major.
    """
    if L < 0:
        raise InvalidArgument("frequency count must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x[None]
    freqs = (2.0 ** np.arange(L)) * np.pi
    ang = x[..., :, None] * freqs  # (..., d, L)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., d, L, 2)
    return enc.reshape(x.shape[:-1] + (2 * L * x.shape[-1],))


@dataclass
class MLP:
    """Fully connected ReLU network with optional input skip connections.

    Layer ``i`` in ``skips`` receives ``concat(input, hidden)``.
    """

    weights: list
    biases: list
    skips: tuple = ()
    output_activation: str = "none"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidArgument("MLP needs matching, non-empty weight and bias lists")
        if self.output_activation not in _ACTIVATIONS:
            raise InvalidArgument(f"unknown output activation {self.output_activation!r}")
        self.skips = tuple(sorted(int(s) for s in self.skips))
        in_dim = self.input_dim
        prev = in_dim
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            expect = prev + (in_dim if i in self.skips and i > 0 else 0)
            if W.ndim != 2 or W.shape[0] != expect or b.shape != (W.shape[1],):
                raise InvalidArgument(f"layer {i} has shape {W.shape}, expected ({expect}, *)")
            prev = W.shape[1]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def astype(self, dtype) -> "MLP":
        return MLP([W.astype(dtype) for W in self.weights], [b.astype(dtype) for b in self.biases],
                   self.skips, self.output_activation)

    def copy(self) -> "MLP":
        return self.astype(self.weights[0].dtype)

    def parameters(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    @classmethod
    def build(cls, in_dim: int, out_dim: int, depth: int, width: int, skips=(),
              output_activation="none", seed=0, dtype=np.float32, zero_last=False) -> "MLP":
        """``depth`` hidden ReLU layers of ``width`` units plus a linear output layer."""
        rng = np.random.default_rng(seed)
        dims_out = [width] * depth + [out_dim]
        weights, biases = [], []
        prev = in_dim
        for i, d in enumerate(dims_out):
            fan_in = prev + (in_dim if i in skips and i > 0 else 0)
            W = rng.normal(scale=np.sqrt(2.0 / fan_in), size=(fan_in, d))
            if zero_last and i == depth:
                W = np.zeros_like(W)
            weights.append(W.astype(dtype))
            biases.append(np.zeros(d, dtype=dtype))
            prev = d
        return cls(weights, biases, tuple(s for s in skips if 0 < s <= depth), output_activation)

    @classmethod
    def zeros_like(cls, other: "MLP") -> "MLP":
        return cls([np.zeros_like(W) for W in other.weights], [np.zeros_like(b) for b in other.biases],
                   other.skips, other.output_activation)


@dataclass
class _ForwardCache:
    x: np.ndarray
    layer_inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    out: np.ndarray | None = None


def _forward(net: MLP, x: np.ndarray) -> _ForwardCache:
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise InvalidArgument(f"input dimension {x.shape[-1]} does not match network ({net.input_dim})")
    x = x.astype(net.weights[0].dtype, copy=False)
    cache = _ForwardCache(x=x)
    h = x
    last = net.n_layers - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        if i in net.skips:
            h = np.concatenate([x, h], axis=1)
        cache.layer_inputs.append(h)
        z = h @ W + b
        cache.pre.append(z)
        h = np.maximum(z, 0) if i < last else z
    if net.output_activation == "sigmoid":
        h = 1.0 / (1.0 + np.exp(-h))
    cache.out = h
    return cache


def mlp_forward(net: MLP, inputs) -> np.ndarray:
    x = np.asarray(inputs)
    single = x.ndim == 1
    out = _forward(net, np.atleast_2d(x)).out
    return out[0] if single else out


def _backward(net: MLP, cache: _ForwardCache, upstream: np.ndarray):
    g = upstream.astype(cache.out.dtype, copy=False)
    if net.output_activation == "sigmoid":
        g = g * cache.out * (1.0 - cache.out)
    in_dim = net.input_dim
    dW = [None] * net.n_layers
    db = [None] * net.n_layers
    dx = np.zeros_like(cache.x)
    for i in range(net.n_layers - 1, -1, -1):
        h_in = cache.layer_inputs[i]
        dW[i] = h_in.T @ g
        db[i] = g.sum(axis=0)
        dh = g @ net.weights[i].T
        if i in net.skips:
            dx += dh[:, :in_dim]
            dh = dh[:, in_dim:]
        if i == 0:
            dx += dh
        else:
            g = dh * (cache.pre[i - 1] > 0)
    return dW, db, dx


def mlp_gradients(net: MLP, inputs, upstream):
    """Analytic gradients of ``sum(upstream * net(inputs))``.

    Returns ``(weight_grads, bias_grads, input_grad)``.
    """
    x = np.atleast_2d(np.asarray(inputs))
    up = np.atleast_2d(np.asarray(upstream))
    if up.shape != (x.shape[0], net.output_dim):
        raise InvalidArgument("upstream gradient shape does not match network output")
    dW, db, dx = _backward(net, _forward(net, x), up)
    if np.asarray(inputs).ndim == 1:
        dx = dx[0]
    return dW, db, dx


# ----------------------------------------------------------------------------
# Deformation and color fields
# ----------------------------------------------------------------------------


@dataclass
class DeformationField:
    """Maps encoded (position, time) to offsets (dx: 3, dr: 4, ds: 3)."""

    mlp: MLP
    pos_freqs: int = 10
    time_freqs: int = 6

    def __post_init__(self):
        if self.mlp.output_dim != 10:
            raise InvalidArgument("deformation network must output exactly 10 values")
        if self.mlp.input_dim != 6 * self.pos_freqs + 2 * self.time_freqs:
            raise InvalidArgument("deformation network input does not match its encoding")

    @classmethod
    def create(cls, depth=8, width=128, skip=4, pos_freqs=10, time_freqs=6, seed=0,
               dtype=np.float32) -> "DeformationField":
        """Random hidden layers; the output layer starts at zero (identity deformation)."""
        in_dim = 6 * pos_freqs + 2 * time_freqs
        mlp = MLP.build(in_dim, 10, depth, width, skips=(skip,) if skip else (), seed=seed,
                        dtype=dtype, zero_last=True)
        return cls(mlp, pos_freqs, time_freqs)

    @classmethod
    def zeros(cls, depth=8, width=128, skip=4, pos_freqs=10, time_freqs=6) -> "DeformationField":
        field_ = cls.create(depth, width, skip, pos_freqs, time_freqs)
        return cls(MLP.zeros_like(field_.mlp), pos_freqs, time_freqs)

    def encode(self, points, t: float) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        pe = positional_encode(points, self.pos_freqs)
        te = positional_encode(np.array([float(t)]), self.time_freqs)
        return np.concatenate([pe, np.broadcast_to(te, (len(points), te.shape[0]))], axis=1)

    def __call__(self, points, t: float) -> np.ndarray:
        if len(np.atleast_2d(points)) == 0:
            return np.zeros((0, 10))
        return mlp_forward(self.mlp, self.encode(points, t)).astype(np.float64)

    def copy(self) -> "DeformationField":
        return DeformationField(self.mlp.copy(), self.pos_freqs, self.time_freqs)


@dataclass
class ColorField:
    """Canonical-space color network with a sigmoid output (zero logits give 0.5 gray)."""

    mlp: MLP
    pos_freqs: int = 10

    def __post_init__(self):
        if self.mlp.output_dim != 3 or self.mlp.output_activation != "sigmoid":
            raise InvalidArgument("color network must output 3 sigmoid channels")
        if self.mlp.input_dim != 6 * self.pos_freqs:
            raise InvalidArgument("color network input does not match its encoding")

    @classmethod
    def create(cls, depth=4, width=128, pos_freqs=10, seed=0, dtype=np.float32) -> "ColorField":
        mlp = MLP.build(6 * pos_freqs, 3, depth, width, output_activation="sigmoid",
                        seed=seed, dtype=dtype)
        return cls(mlp, pos_freqs)

    @classmethod
    def zeros(cls, depth=4, width=128, pos_freqs=10) -> "ColorField":
        return cls(MLP.zeros_like(cls.create(depth, width, pos_freqs).mlp), pos_freqs)

    def encode(self, points) -> np.ndarray:
        return positional_encode(np.atleast_2d(np.asarray(points, dtype=np.float64)), self.pos_freqs)

    def copy(self) -> "ColorField":
        return ColorField(self.mlp.copy(), self.pos_freqs)


def _check_time(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise InvalidArgument(f"normalized time must lie in [0, 1], got {t}")
    return t


def apply_offsets(G: GaussianSet, offsets: np.ndarray) -> GaussianSet:
    """Add raw network offsets (dx, dr, ds) to Gaussian attributes."""
    if len(G) == 0:
        return G
    rot = normalize_quaternions(G.rotations + offsets[:, 3:7])
    scales = np.maximum(G.scales + offsets[:, 7:10], SCALE_FLOOR)
    return G.replace(positions=G.positions + offsets[:, :3], rotations=rot, scales=scales)


def deform_forward(theta: DeformationField, G: GaussianSet, t: float) -> GaussianSet:
    t = _check_time(t)
    if len(G) == 0:
        return G
    return apply_offsets(G, theta(G.positions, t))


def canonical_map(theta_inv: DeformationField, points, t: float) -> np.ndarray:
    """Map deformed-space points toward canonical space: ``p - theta_inv(p)[:3]``."""
    t = _check_time(t)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) == 0:
        return points.reshape(0, 3)
    return points - theta_inv(points, t)[:, :3]


def color_query(color_field: ColorField, points) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) == 0:
        return np.zeros((0, 3))
    return mlp_forward(color_field.mlp, color_field.encode(points)).astype(np.float64)


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------


def save_checkpoint(path, net, role: int) -> None:
    """Binary checkpoint: magic, version, role, encoding, layer headers, float32 data."""
    if isinstance(net, DeformationField):
        mlp, pos_l, time_l = net.mlp, net.pos_freqs, net.time_freqs
    elif isinstance(net, ColorField):
        mlp, pos_l, time_l = net.mlp, net.pos_freqs, 0
    else:
        raise InvalidArgument("can only checkpoint DeformationField or ColorField")
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<BBHHB", CHECKPOINT_VERSION, role, pos_l, time_l,
                       _ACTIVATIONS[mlp.output_activation])
    buf += struct.pack("<I", mlp.n_layers)
    buf += struct.pack("<I", len(mlp.skips))
    buf += struct.pack(f"<{len(mlp.skips)}I", *mlp.skips)
    for W in mlp.weights:
        buf += struct.pack("<II", *W.shape)
    for W, b in zip(mlp.weights, mlp.biases):
        buf += np.ascontiguousarray(W, dtype="<f4").tobytes()
        buf += np.ascontiguousarray(b, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path):
    """Returns ``(network, role)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise InvalidArgument(f"{path}: bad checkpoint magic")
    version, role, pos_l, time_l, act = struct.unpack_from("<BBHHB", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise InvalidArgument(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<BBHHB")
    (n_layers,) = struct.unpack_from("<I", raw, off)
    off += 4
    (n_skips,) = struct.unpack_from("<I", raw, off)
    off += 4
    skips = struct.unpack_from(f"<{n_skips}I", raw, off)
    off += 4 * n_skips
    shapes = [struct.unpack_from("<II", raw, off + 8 * i) for i in range(n_layers)]
    off += 8 * n_layers
    weights, biases = [], []
    for rows, cols in shapes:
        W = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
        off += 4 * rows * cols
        b = np.frombuffer(raw, dtype="<f4", count=cols, offset=off)
        off += 4 * cols
        weights.append(W.astype(np.float32))
        biases.append(b.astype(np.float32))
    activation = {v: k for k, v in _ACTIVATIONS.items()}[act]
    mlp = MLP(weights, biases, tuple(skips), activation)
    if role == ROLE_COLOR:
        return ColorField(mlp, pos_l), role
    return DeformationField(mlp, pos_l, time_l), role
