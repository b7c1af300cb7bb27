"""Small MLP classifiers and the unreduced cross-entropy loss."""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from . import autodiff as ad

CHECKPOINT_MAGIC = "riskmeta-checkpoint v1"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: Sequence[int]
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 2 positive ints, got {self.layer_widths}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def param_names(self):
        names = []
        for i in range(len(self.layer_widths) - 1):
            names += [f"W{i}", f"b{i}"]
        return names

    @property
    def param_shapes(self):
        shapes = []
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes


def init_params(spec):
    """Glorot-uniform weights, zero biases, seeded by ``spec.init_seed``."""
    rng = np.random.default_rng(spec.init_seed)
    params = []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def _check_shapes(spec, theta, x_shape):
    if len(theta) != 2 * (len(spec.layer_widths) - 1):
        raise ad.ShapeError(f"expected {2 * (len(spec.layer_widths) - 1)} parameter arrays, got {len(theta)}")
    for name, want, p in zip(spec.param_names, spec.param_shapes, theta):
        got = tuple(np.shape(p.value if isinstance(p, ad.Node) else p))
        if got != want:
            raise ad.ShapeError(f"parameter {name} has shape {got}, expected {want}")
    if len(x_shape) != 2 or x_shape[1] != spec.layer_widths[0]:
        raise ad.ShapeError(f"input has shape {x_shape}, expected (b, {spec.layer_widths[0]})")


def forward(spec, theta, X):
    """Logits node for a batch ``X``; ``theta`` is a list of nodes on one tape."""
    tape = theta[0].tape
    h = X if isinstance(X, ad.Node) else tape.constant(X)
    _check_shapes(spec, theta, h.shape)
    n_layers = len(theta) // 2
    for i in range(n_layers):
        h = h @ theta[2 * i] + theta[2 * i + 1]
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def forward_array(spec, theta, X):
    """Plain numpy forward pass for evaluation."""
    h = np.asarray(X, dtype=np.float64)
    _check_shapes(spec, theta, h.shape)
    n_layers = len(theta) // 2
    for i in range(n_layers):
        h = h @ theta[2 * i] + theta[2 * i + 1]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def _check_labels(labels, C):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    return labels


def cross_entropy_per_sample(logits, labels):
    """Per-sample ``logsumexp(z_i) - z_i[y_i]`` with no reduction.

    Works on a logits node (returns a vector node) or a plain array.
    """
    if not isinstance(logits, ad.Node):
        logits = np.asarray(logits, dtype=np.float64)
        labels = _check_labels(labels, logits.shape[1])
        return _kernels.cross_entropy_rows(logits, labels)
    b, C = logits.shape
    labels = _check_labels(labels, C)
    onehot = np.zeros((b, C))
    onehot[np.arange(b), labels] = 1.0
    picked = ad.sum(logits * logits.tape.constant(onehot), axis=1)
    return ad.logsumexp(logits) - picked


def accuracy(logits, labels):
    logits = logits.value if isinstance(logits, ad.Node) else np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return 0.0
    return float(np.mean(_kernels.argmax_rows(logits) == labels))


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(path, spec, theta):
    """Text manifest of named shapes, then little-endian float64 data in manifest order."""
    lines = [CHECKPOINT_MAGIC, "widths " + " ".join(str(w) for w in spec.layer_widths)]
    for name, p in zip(spec.param_names, theta):
        lines.append(name + " " + " ".join(str(s) for s in np.shape(p)))
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        for p in theta:
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path, spec=None):
    """Load ``(spec, theta)``; when ``spec`` is given the manifest must match it."""
    with open(path, "rb") as f:
        raw = f.read()
    lines = []
    pos = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: header not terminated")
        line = raw[pos:nl].decode("ascii", errors="replace")
        pos = nl + 1
        if line == "end":
            break
        lines.append(line)
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if not lines[1].startswith("widths "):
        raise CheckpointError(f"{path}: missing widths line")
    widths = tuple(int(t) for t in lines[1].split()[1:])
    file_spec = MlpSpec(widths)
    manifest = [(ln.split()[0], tuple(int(t) for t in ln.split()[1:])) for ln in lines[2:]]
    expected = list(zip(file_spec.param_names, file_spec.param_shapes))
    if manifest != expected:
        raise CheckpointError(f"{path}: manifest {manifest} does not match widths {widths}")
    if spec is not None and tuple(spec.layer_widths) != widths:
        raise CheckpointError(f"{path}: widths {widths} do not match expected {tuple(spec.layer_widths)}")
    total = sum(int(np.prod(s)) for _, s in manifest)
    if len(raw) - pos != 8 * total:
        raise CheckpointError(f"{path}: expected {8 * total} data bytes, got {len(raw) - pos}")
    flat = np.frombuffer(raw, dtype="<f8", offset=pos).astype(np.float64)
    theta = []
    off = 0
    for _, shape in manifest:
        size = int(np.prod(shape))
        theta.append(flat[off:off + size].reshape(shape).copy())
        off += size
    return (spec or file_spec), theta

