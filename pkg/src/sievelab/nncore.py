"""Dense feed-forward classifier with hand-written backprop.

Layer weights are stored as [out, in] matrices. The output layer is always
linear; softmax and cross-entropy live outside the layer stack so the
backward pass can use the fused softmax/cross-entropy gradient.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

RELU = "relu"
IDENTITY = "identity"

# Probabilities are clamped here before log() so cross-entropy stays finite
# on near-one-hot outputs. The clamp only engages below the floor, so exact
# one-hot rows still give a loss of exactly zero.
PROB_FLOOR = 1e-12

_SNAPSHOT_MAGIC = b"SIEVNET1"
_ACT_CODES = {RELU: 0, IDENTITY: 1}
_ACT_NAMES = {code: name for name, code in _ACT_CODES.items()}


@dataclass(frozen=True)
class OptimizerConfig:
    """SGD-with-momentum hyper-parameters for a whole training run.

    ``total_epochs == 0`` is allowed as a degenerate "no training" setting;
    the cosine schedule itself requires at least one epoch.
    """

    lr0: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    total_epochs: int = 300
    lr_decay_factor: float = 100.0

    def __post_init__(self):
        if not (self.lr0 > 0 and math.isfinite(self.lr0)):
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if int(self.total_epochs) != self.total_epochs or self.total_epochs < 0:
            raise ValueError(f"total_epochs must be a nonnegative integer, got {self.total_epochs}")
        if self.lr_decay_factor < 1:
            raise ValueError(f"lr_decay_factor must be >= 1, got {self.lr_decay_factor}")


@dataclass
class Layer:
    weights: np.ndarray  # [out, in]
    bias: np.ndarray     # [out]
    activation: str


@dataclass
class Network:
    """Layer stack plus shape-congruent momentum buffers."""

    layers: list
    vel_w: list
    vel_b: list

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.activation not in _ACT_CODES:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.weights.ndim != 2 or layer.bias.shape != (layer.weights.shape[0],):
                raise ValueError(f"layer {i}: weights/bias shapes do not match")
            if i > 0 and layer.weights.shape[1] != self.layers[i - 1].weights.shape[0]:
                raise ValueError(f"layer {i}: input size does not chain with previous layer")
        if self.layers[-1].activation != IDENTITY:
            raise ValueError("output layer must use the identity activation")
        if self.layers[-1].weights.shape[0] < 2:
            raise ValueError("output layer must produce at least 2 logits")
        if len(self.vel_w) != len(self.layers) or len(self.vel_b) != len(self.layers):
            raise ValueError("momentum buffers must match the layer count")
        for layer, vw, vb in zip(self.layers, self.vel_w, self.vel_b):
            if vw.shape != layer.weights.shape or vb.shape != layer.bias.shape:
                raise ValueError("momentum buffers must be shape-congruent with parameters")

    @property
    def n_inputs(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].weights.shape[0]

    @classmethod
    def fresh(cls, layers) -> "Network":
        """Wrap layers with zero-initialized momentum buffers."""
        return cls(
            layers=list(layers),
            vel_w=[np.zeros_like(l.weights) for l in layers],
            vel_b=[np.zeros_like(l.bias) for l in layers],
        )


def n_parameters(net: Network) -> int:
    return sum(l.weights.size + l.bias.size for l in net.layers)


def init_network(layer_sizes, rng: np.random.Generator) -> Network:
    """Build a ReLU net with a linear output layer.

    Weights are uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError("layer_sizes needs at least input and output sizes")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = IDENTITY if i == len(sizes) - 2 else RELU
        layers.append(Layer(weights=weights, bias=np.zeros(fan_out), activation=act))
    return Network.fresh(layers)


def softmax(logits) -> np.ndarray:
    """Exp-normalize along the last axis, stabilized by max subtraction.

    Max subtraction is mathematically exact: softmax is invariant under
    adding a constant to every logit.
    """
    x = np.asarray(logits, dtype=float)
    if x.shape[-1] < 2:
        raise ValueError("softmax needs at least 2 classes")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_distribution(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("expected a probability vector of length >= 2")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("expected a valid probability distribution")
    return p


def cross_entropy(probs, label: int) -> float:
    """-log(probs[label]), with the probability clamped at PROB_FLOOR."""
    p = _check_distribution(probs)
    if not 0 <= label < p.size:
        raise ValueError(f"label {label} out of range for {p.size} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def per_sample_losses(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row-wise cross-entropy for a [m, k] probability matrix."""
    m = probs.shape[0]
    picked = probs[np.arange(m), labels]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def _check_features(net: Network, features) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D [m, d] matrix")
    if x.shape[1] != net.n_inputs:
        raise ValueError(f"feature dimension {x.shape[1]} does not match net input {net.n_inputs}")
    return x


def forward(net: Network, features) -> np.ndarray:
    """Logits for a batch; row i depends only on feature row i."""
    a = _check_features(net, features)
    for layer in net.layers:
        z = a @ layer.weights.T + layer.bias
        a = np.maximum(z, 0.0) if layer.activation == RELU else z
    return a


def predict_probs(net: Network, features) -> np.ndarray:
    return softmax(forward(net, features))


def backward(net: Network, features, labels):
    """Gradients of the mean cross-entropy over the batch.

    Returns (grads, mean_loss) where grads is a list of (dW, db) pairs
    shape-congruent with the layers.
    """
    x = _check_features(net, features)
    m = x.shape[0]
    if m == 0:
        raise ValueError("batch must be nonempty")
    y = np.asarray(labels)
    if y.shape != (m,):
        raise ValueError("labels must be a vector matching the batch size")
    k = net.n_outputs
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError("labels out of range")

    activations = [x]
    pre_acts = []
    a = x
    for layer in net.layers:
        z = a @ layer.weights.T + layer.bias
        pre_acts.append(z)
        a = np.maximum(z, 0.0) if layer.activation == RELU else z
        activations.append(a)

    probs = softmax(activations[-1])
    mean_loss = float(np.mean(per_sample_losses(probs, y)))

    delta = probs.copy()
    delta[np.arange(m), y] -= 1.0
    delta /= m

    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        grads[i] = (delta.T @ activations[i], delta.sum(axis=0))
        if i > 0:
            delta = delta @ net.layers[i].weights
            if net.layers[i - 1].activation == RELU:
                delta = delta * (pre_acts[i - 1] > 0)
    return grads, mean_loss


def sgd_step(net: Network, grads, lr: float, cfg: OptimizerConfig) -> Network:
    """One momentum-SGD update; returns a new Network, inputs untouched.

    Weight decay is folded into the momentum buffer (coupled convention):
    buf <- momentum * buf + grad + weight_decay * param;
    param <- param - lr * buf. The decay applies to biases as well.
    """
    if len(grads) != len(net.layers):
        raise ValueError("gradient list must match the layer count")
    new_layers, new_vw, new_vb = [], [], []
    for layer, (g_w, g_b), v_w, v_b in zip(net.layers, grads, net.vel_w, net.vel_b):
        if g_w.shape != layer.weights.shape or g_b.shape != layer.bias.shape:
            raise ValueError("gradient shapes must be congruent with parameters")
        nv_w = cfg.momentum * v_w + g_w + cfg.weight_decay * layer.weights
        nv_b = cfg.momentum * v_b + g_b + cfg.weight_decay * layer.bias
        new_layers.append(Layer(layer.weights - lr * nv_w, layer.bias - lr * nv_b, layer.activation))
        new_vw.append(nv_w)
        new_vb.append(nv_b)
    return Network(new_layers, new_vw, new_vb)


def cosine_lr(epoch: int, cfg: OptimizerConfig) -> float:
    """Cosine annealing from lr0 down to lr0 / lr_decay_factor.

    lr(e) = lr_min + (lr0 - lr_min) * (1 + cos(pi * e / total_epochs)) / 2
    """
    if cfg.total_epochs < 1:
        raise ValueError("cosine_lr needs total_epochs >= 1")
    if int(epoch) != epoch or not 0 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} out of range [0, {cfg.total_epochs}]")
    lr_min = cfg.lr0 / cfg.lr_decay_factor
    return lr_min + (cfg.lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / cfg.total_epochs)) / 2.0


def save_network(net: Network, path) -> None:
    """Flat little-endian snapshot: magic, layer count, per-layer dims and
    activation code, then row-major float64 weights followed by the bias."""
    with open(path, "wb") as fh:
        fh.write(_SNAPSHOT_MAGIC)
        fh.write(struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            out_dim, in_dim = layer.weights.shape
            fh.write(struct.pack("<III", out_dim, in_dim, _ACT_CODES[layer.activation]))
        for layer in net.layers:
            fh.write(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def load_network(path) -> Network:
    """Inverse of save_network. Momentum buffers come back zeroed."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_SNAPSHOT_MAGIC)] != _SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a network snapshot (bad magic)")
    off = len(_SNAPSHOT_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise ValueError(f"{path}: truncated snapshot at byte {off}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    (n_layers,) = struct.unpack("<I", take(4))
    shapes = []
    for _ in range(n_layers):
        out_dim, in_dim, act = struct.unpack("<III", take(12))
        if act not in _ACT_NAMES:
            raise ValueError(f"{path}: unknown activation code {act}")
        shapes.append((out_dim, in_dim, _ACT_NAMES[act]))
    layers = []
    for out_dim, in_dim, act in shapes:
        w = np.frombuffer(take(8 * out_dim * in_dim), dtype="<f8").reshape(out_dim, in_dim).copy()
        b = np.frombuffer(take(8 * out_dim), dtype="<f8").copy()
        layers.append(Layer(w, b, act))
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes after snapshot")
    return Network.fresh(layers)
