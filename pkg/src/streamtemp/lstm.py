"""LSTM sequence model: parameters, forward pass, exact backpropagation.

The cell follows the standard formulation with a candidate update and
forget/input/output gates, per-gate biases, zero initial states, and a linear
projection from the top layer's hidden state to the output.  Stacked layers
apply inverted dropout to the hidden sequence passed upward (never to the
recurrent path or the top layer's output).

Gradients are computed by full backpropagation through time and are exact
for the sampled dropout masks; see ``tests`` for the finite-difference
verification.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numerics import Rng, xavier_normal_init

__all__ = [
    "LstmConfig",
    "LstmLayerParams",
    "LstmParams",
    "StepState",
    "step",
    "project",
    "forward",
    "forward_batch",
    "backward_batch",
    "backward",
    "masked_mse",
    "masked_mse_gradient",
    "EmptyMaskWarning",
]

GATE_ORDER = ("candidate", "forget", "input", "output")


class EmptyMaskWarning(UserWarning):
    """A loss was requested over a mask with no selected cells."""


@dataclass
class LstmConfig:
    """Architecture and windowing settings for one model."""

    hidden_size: int = 16
    num_layers: int = 1
    dropout_rate: float = 0.0
    sequence_length: int = 200
    window_shift: int = 100

    def __post_init__(self):
        if self.hidden_size < 1 or self.num_layers < 1:
            raise ValueError("hidden_size and num_layers must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not 0 < self.window_shift <= self.sequence_length:
            raise ValueError("window_shift must lie in (0, sequence_length]")


@dataclass
class StepState:
    """Hidden and cell state of a single layer at one timestep."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_size: int) -> "StepState":
        return cls(h=np.zeros(hidden_size), c=np.zeros(hidden_size))


@dataclass
class LstmLayerParams:
    """Weights of one layer, gate rows stacked candidate/forget/input/output.

    ``w_x`` is (4H, D), ``w_h`` is (4H, H), ``b`` is (4H,).  The per-gate
    blocks are exposed through :meth:`gate_block`.
    """

    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]

    def gate_block(self, gate: str, which: str) -> np.ndarray:
        """Return the (H, ...) slice of ``w_x``/``w_h``/``b`` for one gate."""
        k = GATE_ORDER.index(gate)
        h = self.hidden_size
        target = {"w_x": self.w_x, "w_h": self.w_h, "b": self.b}[which]
        return target[k * h : (k + 1) * h]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: Rng) -> "LstmLayerParams":
        """Xavier-normal weights per gate block, zero biases."""
        w_x = np.vstack([xavier_normal_init(hidden_size, input_size, rng) for _ in GATE_ORDER])
        w_h = np.vstack([xavier_normal_init(hidden_size, hidden_size, rng) for _ in GATE_ORDER])
        return cls(w_x=w_x, w_h=w_h, b=np.zeros(4 * hidden_size))


@dataclass
class LstmParams:
    """Full parameter set: stacked layers plus the output projection."""

    layers: list[LstmLayerParams]
    w_out: np.ndarray
    b_out: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.layers[0].hidden_size

    @property
    def input_size(self) -> int:
        return self.layers[0].input_size

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def output_size(self) -> int:
        return self.w_out.shape[0]

    @classmethod
    def init(cls, input_size: int, config: LstmConfig, rng: Rng, output_size: int = 1) -> "LstmParams":
        layers = []
        d = input_size
        for _ in range(config.num_layers):
            layers.append(LstmLayerParams.init(d, config.hidden_size, rng))
            d = config.hidden_size
        w_out = xavier_normal_init(output_size, config.hidden_size, rng)
        return cls(layers=layers, w_out=w_out, b_out=np.zeros(output_size))

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        """All parameter arrays in a fixed, named order."""
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"layers.{i}.w_x", layer.w_x))
            out.append((f"layers.{i}.w_h", layer.w_h))
            out.append((f"layers.{i}.b", layer.b))
        out.append(("w_out", self.w_out))
        out.append(("b_out", self.b_out))
        return out

    def copy(self) -> "LstmParams":
        return LstmParams(
            layers=[LstmLayerParams(l.w_x.copy(), l.w_h.copy(), l.b.copy()) for l in self.layers],
            w_out=self.w_out.copy(),
            b_out=self.b_out.copy(),
        )

    def save(self, path_prefix: str) -> None:
        """Write ``<prefix>.npz`` (arrays) and ``<prefix>.json`` (shape manifest)."""
        arrays = dict(self.arrays())
        np.savez(f"{path_prefix}.npz", **arrays)
        manifest = {
            "format": 1,
            "num_layers": self.num_layers,
            "input_size": self.input_size,
            "hidden_size": self.hidden_size,
            "output_size": self.output_size,
            "arrays": {name: list(a.shape) for name, a in arrays.items()},
        }
        with open(f"{path_prefix}.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path_prefix: str) -> "LstmParams":
        with open(f"{path_prefix}.json") as fh:
            manifest = json.load(fh)
        with np.load(f"{path_prefix}.npz") as data:
            arrays = {name: data[name] for name in data.files}
        for name, shape in manifest["arrays"].items():
            if name not in arrays or list(arrays[name].shape) != shape:
                raise ValueError(f"array {name!r} missing or shaped differently than manifest")
        layers = [
            LstmLayerParams(
                w_x=arrays[f"layers.{i}.w_x"],
                w_h=arrays[f"layers.{i}.w_h"],
                b=arrays[f"layers.{i}.b"],
            )
            for i in range(manifest["num_layers"])
        ]
        return cls(layers=layers, w_out=arrays["w_out"], b_out=arrays["b_out"])


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-a))


def step(layer: LstmLayerParams, x: np.ndarray, prev: StepState) -> StepState:
    """Advance one layer by a single timestep (reference implementation).

    The batched kernels are validated against compositions of this function.
    """
    h = layer.hidden_size
    a = layer.w_x @ x + layer.w_h @ prev.h + layer.b
    cand = np.tanh(a[:h])
    f = _sigmoid(a[h : 2 * h])
    g = _sigmoid(a[2 * h : 3 * h])
    o = _sigmoid(a[3 * h :])
    c = f * prev.c + g * cand
    return StepState(h=o * np.tanh(c), c=c)


def project(params: LstmParams, h: np.ndarray) -> np.ndarray:
    """Linear output projection of a top-layer hidden state."""
    return params.w_out @ h + params.b_out


@dataclass
class _LayerCache:
    x: np.ndarray  # (T, B, D) input to this layer (post-dropout of lower output)
    h: np.ndarray
    c: np.ndarray
    gates: np.ndarray
    drop_mask: np.ndarray | None  # applied to this layer's output feeding upward


@dataclass
class ForwardCache:
    layers: list[_LayerCache] = field(default_factory=list)


def forward_batch(
    params: LstmParams,
    inputs: np.ndarray,
    dropout_rate: float = 0.0,
    rng: Rng | None = None,
    return_cache: bool = False,
):
    """Run the full stack over a batch.

    Args:
        inputs: (B, T, D) batch of sequences.
        dropout_rate: inverted-dropout probability applied between stacked
            layers; requires ``rng`` when positive and there is more than one
            layer.  Zero initial states; dropped activations are rescaled by
            1/(1-p) so their expectation matches the undropped path.

    Returns:
        (B, T, O) predictions, or (predictions, cache) with ``return_cache``.
    """
    if inputs.ndim != 3:
        raise ValueError("forward_batch expects a (B, T, D) input block")
    if inputs.shape[2] != params.input_size:
        raise ValueError(f"input feature dimension {inputs.shape[2]} != model input size {params.input_size}")
    if dropout_rate > 0.0 and params.num_layers > 1 and rng is None:
        raise ValueError("dropout requires an rng")
    x = np.ascontiguousarray(np.transpose(inputs, (1, 0, 2)), dtype=np.float64)
    cache = ForwardCache()
    n_layers = params.num_layers
    for i, layer in enumerate(params.layers):
        w_x_t = np.ascontiguousarray(layer.w_x.T)
        w_h_t = np.ascontiguousarray(layer.w_h.T)
        h, c, gates = kernels.lstm_layer_forward(x, w_x_t, w_h_t, layer.b)
        drop_mask = None
        out = h
        if dropout_rate > 0.0 and i < n_layers - 1:
            keep = rng.generator.random(h.shape) >= dropout_rate
            drop_mask = keep / (1.0 - dropout_rate)
            out = h * drop_mask
        cache.layers.append(_LayerCache(x=x, h=h, c=c, gates=gates, drop_mask=drop_mask))
        x = out
    # (T, B, H) @ (H, O) + b, back to batch-major
    preds = np.transpose(cache.layers[-1].h @ params.w_out.T + params.b_out, (1, 0, 2))
    if return_cache:
        return preds, cache
    return preds


def forward(params: LstmParams, inputs: np.ndarray) -> np.ndarray:
    """Inference over a single (T, D) sequence; returns (T, O)."""
    if inputs.ndim != 2:
        raise ValueError("forward expects a (T, D) sequence")
    return forward_batch(params, inputs[None, :, :])[0]


def backward_batch(params: LstmParams, cache: ForwardCache, dpred: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate a (B, T, O) prediction gradient through the cached pass.

    Returns a gradient dict keyed like :meth:`LstmParams.arrays`.
    """
    dpred_tm = np.ascontiguousarray(np.transpose(dpred, (1, 0, 2)))
    h_top = cache.layers[-1].h
    grads: dict[str, np.ndarray] = {
        "w_out": np.tensordot(dpred_tm, h_top, axes=([0, 1], [0, 1])),
        "b_out": dpred_tm.sum(axis=(0, 1)),
    }
    dh = np.ascontiguousarray(dpred_tm @ params.w_out)  # (T, B, H)
    for i in range(params.num_layers - 1, -1, -1):
        lc = cache.layers[i]
        layer = params.layers[i]
        dw_x, dw_h, db, dx = kernels.lstm_layer_backward(lc.x, lc.h, lc.c, lc.gates, layer.w_x, layer.w_h, dh)
        grads[f"layers.{i}.w_x"] = dw_x
        grads[f"layers.{i}.w_h"] = dw_h
        grads[f"layers.{i}.b"] = db
        if i > 0:
            below = cache.layers[i - 1]
            dh = dx * below.drop_mask if below.drop_mask is not None else dx
            dh = np.ascontiguousarray(dh)
    return grads


def masked_mse(preds: np.ndarray, targets: np.ndarray, mask: np.ndarray, reduction: str = "mean") -> float:
    """Squared-error loss over mask-true cells only.

    ``reduction`` is ``"mean"`` (divide by the count of selected cells) or
    ``"sum"``.  Target values outside the mask are ignored entirely, so NaN
    placeholders there are safe.  An all-false mask warns and returns 0.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        warnings.warn("masked_mse over an empty mask", EmptyMaskWarning, stacklevel=2)
        return 0.0
    r = preds[mask] - targets[mask]
    with np.errstate(over="ignore"):  # divergence surfaces as inf, handled upstream
        total = float(r @ r)
    return total / mask.sum() if reduction == "mean" else total


def masked_mse_gradient(preds: np.ndarray, targets: np.ndarray, mask: np.ndarray, reduction: str = "mean") -> np.ndarray:
    """Gradient of :func:`masked_mse` w.r.t. ``preds`` (zero off-mask)."""
    mask = np.asarray(mask, dtype=bool)
    grad = np.zeros_like(preds)
    if not mask.any():
        return grad
    scale = 2.0 / mask.sum() if reduction == "mean" else 2.0
    grad[mask] = scale * (preds[mask] - targets[mask])
    return grad


def backward(
    params: LstmParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray,
    reduction: str = "mean",
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact parameter gradients of the masked MSE on a batch.

    Args:
        inputs: (B, T, D) sequences.
        targets: (B, T) target values; entries outside ``mask`` are ignored.
        mask: (B, T) boolean prediction mask.

    Returns:
        (loss, grads) where grads is keyed like :meth:`LstmParams.arrays`.
    """
    preds, cache = forward_batch(params, inputs, return_cache=True)
    loss = masked_mse(preds[:, :, 0], targets, mask, reduction)
    dpred = masked_mse_gradient(preds[:, :, 0], targets, mask, reduction)[:, :, None]
    return loss, backward_batch(params, cache, dpred)
