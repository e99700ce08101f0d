"""Differentiable next-location model with exact gradients.

The model is a one-hidden-layer tanh network over a flattened window of
planar coordinates, with a softmax classifier over spatial grid cells:

    logits = W2 @ tanh(W1 @ z + b1) + b2,   z = flatten(inputs) / scale

Parameters and gradients travel as flat float64 vectors in a fixed layout
(W1 row-major, b1, W2 row-major, b2). Everything here is pure, which keeps
both the parameter gradient and the second-order gradient of the
gradient-matching objective hand-derivable and checkable against central
finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError, NumericError


@dataclass(frozen=True)
class ModelSpec:
    """Architecture constants: window length k, hidden width, cell count, scale."""

    window_len: int
    hidden_units: int
    num_cells: int
    coordinate_scale: float

    def __post_init__(self):
        if self.window_len < 1:
            raise InputError("window_len must be >= 1")
        if self.hidden_units < 1:
            raise InputError("hidden_units must be >= 1")
        if self.num_cells < 2:
            raise InputError("num_cells must be >= 2")
        if not (self.coordinate_scale > 0 and math.isfinite(self.coordinate_scale)):
            raise InputError("coordinate_scale must be positive and finite")

    @property
    def input_dim(self) -> int:
        return 2 * self.window_len

    @property
    def num_params(self) -> int:
        h, d, g = self.hidden_units, self.input_dim, self.num_cells
        return h * d + h + g * h + g

    def param_slices(self) -> tuple[slice, slice, slice, slice]:
        h, d, g = self.hidden_units, self.input_dim, self.num_cells
        o1 = h * d
        o2 = o1 + h
        o3 = o2 + g * h
        return slice(0, o1), slice(o1, o2), slice(o2, o3), slice(o3, o3 + g)

    def to_dict(self) -> dict:
        return {
            "k": self.window_len,
            "H": self.hidden_units,
            "G": self.num_cells,
            "coordinate_scale": self.coordinate_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            return cls(int(d["k"]), int(d["H"]), int(d["G"]), float(d["coordinate_scale"]))
        except KeyError as exc:
            raise ConfigurationError(f"model spec missing key {exc}") from exc


def unpack_params(spec: ModelSpec, params: np.ndarray):
    """Views (W1, b1, W2, b2) into a flat parameter or gradient vector."""
    vec = np.asarray(params, dtype=np.float64)
    if vec.shape != (spec.num_params,):
        raise ConfigurationError(
            f"parameter vector has shape {vec.shape}, expected ({spec.num_params},)"
        )
    s1, s2, s3, s4 = spec.param_slices()
    h, d, g = spec.hidden_units, spec.input_dim, spec.num_cells
    return vec[s1].reshape(h, d), vec[s2], vec[s3].reshape(g, h), vec[s4]


def pack_params(spec: ModelSpec, w1, b1, w2, b2) -> np.ndarray:
    out = np.empty(spec.num_params, dtype=np.float64)
    s1, s2, s3, s4 = spec.param_slices()
    out[s1] = np.asarray(w1, dtype=np.float64).ravel()
    out[s2] = b1
    out[s3] = np.asarray(w2, dtype=np.float64).ravel()
    out[s4] = b2
    return out


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Random initial parameters, scaled by fan-in; biases start at zero."""
    h, d, g = spec.hidden_units, spec.input_dim, spec.num_cells
    w1 = rng.standard_normal((h, d)) / math.sqrt(d)
    w2 = rng.standard_normal((g, h)) / math.sqrt(h)
    return pack_params(spec, w1, np.zeros(h), w2, np.zeros(g))


@dataclass
class TrainingWindow:
    """k input locations plus a label: a grid-cell index or a free logit vector."""

    inputs: np.ndarray  # (k, 2) planar meters
    label: int | np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if not isinstance(self.label, (int, np.integer)):
            self.label = np.asarray(self.label, dtype=np.float64)


def _check_window(spec: ModelSpec, window: TrainingWindow) -> None:
    if window.inputs.shape != (spec.window_len, 2):
        raise ConfigurationError(
            f"window inputs have shape {window.inputs.shape}, expected ({spec.window_len}, 2)"
        )
    if isinstance(window.label, (int, np.integer)):
        if not 0 <= int(window.label) < spec.num_cells:
            raise InputError(f"label cell {window.label} outside [0, {spec.num_cells})")
    elif window.label.shape != (spec.num_cells,):
        raise ConfigurationError(
            f"label vector has shape {window.label.shape}, expected ({spec.num_cells},)"
        )


def softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def _label_distribution(spec: ModelSpec, label) -> np.ndarray:
    if isinstance(label, (int, np.integer)):
        q = np.zeros(spec.num_cells)
        q[int(label)] = 1.0
        return q
    return softmax(label)


def _forward_core(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray):
    z = np.asarray(inputs, dtype=np.float64).ravel() / spec.coordinate_scale
    w1, b1, w2, b2 = unpack_params(spec, params)
    h = np.tanh(w1 @ z + b1)
    logits = w2 @ h + b2
    return z, h, logits, w1, w2


def forward(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Class logits for a window of k locations."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape != (spec.window_len, 2):
        raise ConfigurationError(
            f"inputs have shape {inputs.shape}, expected ({spec.window_len}, 2)"
        )
    return _forward_core(spec, params, inputs)[2]


def loss(spec: ModelSpec, params: np.ndarray, window: TrainingWindow) -> float:
    """Cross-entropy between softmax(logits) and the label distribution."""
    _check_window(spec, window)
    _, _, logits, _, _ = _forward_core(spec, params, window.inputs)
    q = _label_distribution(spec, window.label)
    m = logits.max()
    logz = m + math.log(np.exp(logits - m).sum())
    return float(logz - q @ logits)


def param_gradient(spec: ModelSpec, params: np.ndarray, window: TrainingWindow) -> np.ndarray:
    """Exact gradient of the loss with respect to every parameter."""
    _check_window(spec, window)
    z, h, logits, w1, w2 = _forward_core(spec, params, window.inputs)
    p = softmax(logits)
    q = _label_distribution(spec, window.label)
    r = p - q
    da = (w2.T @ r) * (1.0 - h * h)
    g = np.empty(spec.num_params, dtype=np.float64)
    s1, s2, s3, s4 = spec.param_slices()
    g[s1] = np.outer(da, z).ravel()
    g[s2] = da
    g[s3] = np.outer(r, h).ravel()
    g[s4] = r
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NumericError(f"non-finite parameter gradient at flat index {bad}")
    return g


def gradient_distance(
    spec: ModelSpec, params: np.ndarray, window: TrainingWindow, true_grad: np.ndarray
) -> float:
    """Squared L2 distance between the window's gradient and a target gradient."""
    g = param_gradient(spec, params, window)
    diff = g - np.asarray(true_grad, dtype=np.float64)
    return float(diff @ diff)


def attack_objective(
    spec: ModelSpec, params: np.ndarray, dummy: TrainingWindow, true_grad: np.ndarray
):
    """Value and exact gradients of D = ||grad(dummy) - true_grad||^2.

    Returns (value, d_inputs, d_label) where d_inputs has shape (k, 2) in
    per-meter units and d_label has shape (G,). The input/label gradients are
    second-order quantities (they differentiate through param_gradient); they
    are computed as a closed-form vector-Jacobian product with
    v = 2 (grad(dummy) - true_grad), so no numeric differentiation is involved.
    """
    _check_window(spec, dummy)
    if isinstance(dummy.label, (int, np.integer)):
        raise InputError("attack objective needs a free label vector, not a cell index")
    true_grad = np.asarray(true_grad, dtype=np.float64)
    if true_grad.shape != (spec.num_params,):
        raise ConfigurationError(
            f"true gradient has shape {true_grad.shape}, expected ({spec.num_params},)"
        )
    z, h, logits, w1, w2 = _forward_core(spec, params, dummy.inputs)
    p = softmax(logits)
    q = softmax(dummy.label)
    r = p - q
    s = 1.0 - h * h
    u = w2.T @ r
    da = u * s

    g = np.empty(spec.num_params, dtype=np.float64)
    s1, s2, s3, s4 = spec.param_slices()
    g[s1] = np.outer(da, z).ravel()
    g[s2] = da
    g[s3] = np.outer(r, h).ravel()
    g[s4] = r

    diff = g - true_grad
    value = float(diff @ diff)
    v = 2.0 * diff
    vw1 = v[s1].reshape(spec.hidden_units, spec.input_dim)
    vb1 = v[s2]
    vw2 = v[s3].reshape(spec.num_cells, spec.hidden_units)
    vb2 = v[s4]

    # phi(z, y) = v . g decomposes as da . m + r . w with the terms below;
    # backpropagating phi through the forward graph gives the exact gradients.
    m = vw1 @ z + vb1
    w = vw2 @ h + vb2
    t = w + w2 @ (m * s)  # d phi / d r
    d_label = -(q * t - q * (q @ t))
    lbar = p * t - p * (p @ t)
    hbar = -2.0 * m * u * h + vw2.T @ r + w2.T @ lbar
    abar = hbar * s
    zbar = w1.T @ abar + vw1.T @ da
    d_inputs = (zbar / spec.coordinate_scale).reshape(spec.window_len, 2)
    return value, d_inputs, d_label


def attack_gradient(
    spec: ModelSpec, params: np.ndarray, dummy: TrainingWindow, true_grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of the gradient-matching objective w.r.t. dummy data."""
    value, d_inputs, d_label = attack_objective(spec, params, dummy, true_grad)
    if not (math.isfinite(value) and np.all(np.isfinite(d_inputs)) and np.all(np.isfinite(d_label))):
        raise NumericError("non-finite attack gradient")
    return d_inputs, d_label


def predict_ranking(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> list[int]:
    """Cell indices sorted by descending logit; ties break on the lower index."""
    logits = forward(spec, params, inputs)
    return [int(i) for i in np.argsort(-logits, kind="stable")]


def recall_at_k(ranked_predictions, truths, k: int) -> float:
    """Fraction of truths appearing in the top-k of their ranking."""
    if len(ranked_predictions) != len(truths):
        raise InputError(
            f"{len(ranked_predictions)} rankings vs {len(truths)} truths"
        )
    if not truths:
        raise InputError("recall needs at least one sample")
    if k < 1:
        raise InputError("k must be >= 1")
    hits = sum(1 for ranking, truth in zip(ranked_predictions, truths) if truth in ranking[:k])
    return hits / len(truths)


@dataclass(frozen=True)
class CellGrid:
    """Equal-cell partition of a bounding box into num_cells classes.

    The cell count factors as nx * ny with ny the largest divisor not above
    sqrt(num_cells), so the partition always has exactly num_cells equal cells
    (a perfect square gives a square grid; a prime gives parallel strips).
    """

    x_min: float
    y_min: float
    cell_w: float
    cell_h: float
    nx: int
    ny: int

    @classmethod
    def from_bbox(cls, bbox: tuple[float, float, float, float], num_cells: int) -> "CellGrid":
        if num_cells < 2:
            raise InputError("need at least 2 cells")
        x0, y0, x1, y1 = bbox
        if not (x1 >= x0 and y1 >= y0):
            raise InputError(f"degenerate bounding box {bbox}")
        ny = 1
        for d in range(1, int(math.isqrt(num_cells)) + 1):
            if num_cells % d == 0:
                ny = d
        nx = num_cells // ny
        w = max(x1 - x0, 1e-9) / nx
        h = max(y1 - y0, 1e-9) / ny
        return cls(x0, y0, w, h, nx, ny)

    @property
    def num_cells(self) -> int:
        return self.nx * self.ny

    def cell_index(self, x: float, y: float) -> int:
        col = min(max(int((x - self.x_min) / self.cell_w), 0), self.nx - 1)
        row = min(max(int((y - self.y_min) / self.cell_h), 0), self.ny - 1)
        return row * self.nx + col


def write_params(spec: ModelSpec, params: np.ndarray, path) -> None:
    """Raw little-endian float64 dump at ``path`` plus a ``path + '.json'`` sidecar."""
    vec = np.asarray(params, dtype=np.float64)
    if vec.shape != (spec.num_params,):
        raise ConfigurationError("parameter vector does not match the spec")
    with open(path, "wb") as fh:
        fh.write(vec.astype("<f8").tobytes())
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh)


def read_params(path) -> tuple[ModelSpec, np.ndarray]:
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        spec = ModelSpec.from_dict(json.load(fh))
    with open(path, "rb") as fh:
        vec = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if vec.shape != (spec.num_params,):
        raise ConfigurationError(
            f"parameter file holds {vec.shape[0]} values, spec expects {spec.num_params}"
        )
    if not np.all(np.isfinite(vec)):
        raise ConfigurationError(f"parameter file {path} contains non-finite values")
    return spec, vec
