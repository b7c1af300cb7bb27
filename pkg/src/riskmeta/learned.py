"""The learnable mini-batch risk head.

The head holds one logit per batch position.  Its output on a batch is the
softmax-weighted sum of the batch losses sorted from largest to smallest, so
position 0 always multiplies the largest loss.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class PhiParams:
    phi: np.ndarray
    b: int

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64).copy()
        if self.phi.shape != (self.b,):
            raise ValueError(f"phi has shape {self.phi.shape}, expected ({self.b},)")

    @property
    def weights(self):
        return softmax_weights(self.phi)

    def copy(self):
        return PhiParams(self.phi.copy(), self.b)


@dataclass(frozen=True)
class WeightSnapshot:
    step: int
    weights: np.ndarray
    entropy: float


def softmax_weights(phi):
    phi = np.asarray(phi, dtype=np.float64)
    e = np.exp(phi - phi.max())
    return e / e.sum()


def entropy(weights):
    w = np.asarray(weights, dtype=np.float64)
    nz = w[w > 0]
    return float(-np.sum(nz * np.log(nz)))


def init_phi(b):
    if b < 1:
        raise ValueError(f"batch size must be >= 1, got {b}")
    return PhiParams(np.zeros(b), b)


def apply(phi, losses):
    """Softmax-weighted sum of ``losses`` sorted largest-first.

    ``phi`` may be ``PhiParams`` (treated as constant) or a length-``b``
    node on the same tape as ``losses`` (differentiable).
    """
    if isinstance(phi, PhiParams):
        b = phi.b
        phi_node = losses.tape.constant(phi.phi)
    else:
        phi_node = phi
        b = phi_node.shape[0]
    if losses.value.ndim != 1 or losses.shape[0] != b:
        raise ValueError(
            f"risk head is bound to batch size {b}, got losses of shape {losses.value.shape}"
        )
    srt, _ = ad.sort_desc(losses)
    return ad.sum(ad.softmax(phi_node) * srt)


def apply_array(phi, losses):
    """Float-valued ``apply`` for plain arrays."""
    losses = np.asarray(losses, dtype=np.float64)
    w = phi.weights if isinstance(phi, PhiParams) else softmax_weights(phi)
    if losses.shape != w.shape:
        raise ValueError(f"risk head is bound to batch size {w.shape[0]}, got {losses.shape}")
    return float(np.sum(w * np.sort(losses)[::-1]))


def snapshot(phi, step):
    w = phi.weights
    return WeightSnapshot(int(step), w, entropy(w))


def write_snapshots(path, snapshots):
    """CSV ``step,w_0,...,w_{b-1},entropy``; ``w_0`` multiplies the largest loss."""
    snapshots = list(snapshots)
    b = snapshots[0].weights.shape[0] if snapshots else 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step"] + [f"w_{i}" for i in range(b)] + ["entropy"])
        for s in snapshots:
            writer.writerow([s.step] + [repr(float(x)) for x in s.weights] + [repr(s.entropy)])


def read_snapshots(path):
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[0] != "step" or header[-1] != "entropy":
            raise ValueError(f"{path}: not a weight snapshot file")
        for row in reader:
            out.append(WeightSnapshot(int(row[0]), np.array([float(x) for x in row[1:-1]]), float(row[-1])))
    return out


def max_entropy(b):
    return math.log(b)
