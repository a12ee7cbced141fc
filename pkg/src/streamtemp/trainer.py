"""Training loop for the sequence model.

Sites are cut into fixed-length windows advanced by a fixed shift; windows
from all sites are pooled and shuffled each epoch.  Only a window's second
half collects loss, except a site's first window, which is usable over its
whole length (nothing earlier could cover those days).  The earliest 20% of
each site's observed dates are withheld as validation for early stopping.

Optimization is AdamW with decoupled weight decay.  Each ensemble member
adopts one of the tuned hyperparameter presets in round-robin order and its
own child RNG, so an ensemble is reproducible from (data, config, seed).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data_model import FeatureSpec, SiteRecord, build_dynamic_inputs
from .lstm import (
    LstmConfig,
    LstmParams,
    backward_batch,
    forward_batch,
    masked_mse,
    masked_mse_gradient,
)
from .normalize import Normalizer
from .numerics import Rng

__all__ = [
    "HyperPreset",
    "HYPERPARAMETER_PRESETS",
    "TrainConfig",
    "Window",
    "make_windows",
    "masked_mse",
    "adamw_step",
    "AdamW",
    "SiteTrainingData",
    "prepare_site",
    "split_validation",
    "fit_pool_normalizer",
    "TrainLogEntry",
    "TrainingDivergedError",
    "train",
    "EnsembleMember",
    "EnsembleModel",
    "train_ensemble",
    "predict_site_series",
]


@dataclass(frozen=True)
class HyperPreset:
    """One tuned hyperparameter draw used by ensemble members."""

    batch_size: int
    hidden_size: int
    num_layers: int
    weight_decay: float
    dropout_rate: float


HYPERPARAMETER_PRESETS = (
    HyperPreset(496, 570, 4, 4.128e-06, 2.216e-05),
    HyperPreset(236, 594, 3, 4.753e-07, 0.0138),
    HyperPreset(521, 699, 5, 2.974e-07, 0.0883),
    HyperPreset(201, 760, 3, 9.684e-06, 0.0518),
    HyperPreset(489, 764, 5, 2.005e-04, 0.0145),
)

# preset fields adopted by ensemble members; trimmed lists let desk-scale
# runs keep regularization from the presets while pinning network size
ALL_PRESET_FIELDS = ("batch_size", "hidden_size", "num_layers", "weight_decay", "dropout_rate")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    patience: int = 300
    max_epochs: int = 1000
    seed: int = 0
    hyper_preset: int | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be positive, batch_size >= 1")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during optimization."""


@dataclass(frozen=True)
class Window:
    """A model window over a site's date axis.

    Data occupies positions [pad, T); position p maps to site index
    ``offset + (p - pad)``.  Loss may be collected from positions
    >= ``maskable_from`` only.
    """

    offset: int
    pad: int
    maskable_from: int


def make_windows(n_dates: int, sequence_length: int = 200, window_shift: int = 100) -> list[Window]:
    """Enumerate training windows over a contiguous axis of ``n_dates`` days.

    Windows start at multiples of the shift; if the last one would leave a
    tail uncovered, an extra window snapped to the end is appended.  A series
    shorter than one window yields a single left-padded window.  The first
    window is maskable over its full length; all others only from
    ``window_shift`` onward.
    """
    if n_dates <= 0:
        return []
    if n_dates < sequence_length:
        pad = sequence_length - n_dates
        return [Window(offset=0, pad=pad, maskable_from=pad)]
    offsets = list(range(0, n_dates - sequence_length + 1, window_shift))
    if offsets[-1] != n_dates - sequence_length:
        offsets.append(n_dates - sequence_length)
    return [Window(offset=o, pad=0, maskable_from=0 if o == 0 else window_shift) for o in offsets]


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place AdamW update of a single array (t is the 1-based step).

    Weight decay is decoupled: it scales the parameter directly instead of
    entering the moment estimates.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * (m_hat / (np.sqrt(v_hat) + eps)) + lr * weight_decay * param


class AdamW:
    """Optimizer state over a full parameter set."""

    def __init__(self, params: LstmParams, lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.t = 0
        self.state = {name: (np.zeros_like(a), np.zeros_like(a)) for name, a in params.arrays()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, arr in self.params.arrays():
            m, v = self.state[name]
            adamw_step(arr, grads[name], m, v, self.t, self.lr, self.weight_decay)


@dataclass
class SiteTrainingData:
    """One site's model-ready series: raw inputs, targets in C, validation mask."""

    site_id: str
    inputs_raw: np.ndarray  # (n, D)
    targets_c: np.ndarray  # (n,), NaN where unobserved
    val_mask: np.ndarray  # (n,) bool, subset of observed days

    @property
    def n_dates(self) -> int:
        return self.inputs_raw.shape[0]


def split_validation(observed_mask: np.ndarray, fraction: float = 0.2) -> np.ndarray:
    """Mark the earliest ``floor(fraction * n_obs)`` observed days (at least 1).

    Returns a boolean mask aligned with the date axis.
    """
    observed_mask = np.asarray(observed_mask, dtype=bool)
    n_obs = int(observed_mask.sum())
    if n_obs < 5:
        raise ValueError(f"need >= 5 observed days to split validation, have {n_obs}")
    n_val = max(1, math.floor(fraction * n_obs))
    idx = np.flatnonzero(observed_mask)[:n_val]
    out = np.zeros(observed_mask.shape, dtype=bool)
    out[idx] = True
    return out


def prepare_site(
    site: SiteRecord,
    spec: FeatureSpec,
    attribute_values: dict[str, float] | None = None,
    val_fraction: float = 0.2,
) -> SiteTrainingData:
    """Turn a site record into model-ready training series."""
    x, _ = build_dynamic_inputs(site, spec, attribute_values)
    val = split_validation(site.observed_mask, val_fraction)
    return SiteTrainingData(site.site_id, x, site.water_temp.copy(), val)


def fit_pool_normalizer(data: list[SiteTrainingData], feature_names) -> Normalizer:
    """Fit normalization on the pooled training sites.

    Input statistics pool every modeled day of every site; target statistics
    use observed, non-validation days only, so validation values never leak
    into the scaling.
    """
    x = np.vstack([d.inputs_raw for d in data])
    ys = []
    for d in data:
        use = ~np.isnan(d.targets_c) & ~d.val_mask
        ys.append(d.targets_c[use])
    return Normalizer.fit(x, np.concatenate(ys), feature_names)


@dataclass
class TrainLogEntry:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class _WindowTensors:
    inputs: np.ndarray  # (W, T, D)
    targets: np.ndarray  # (W, T) normalized, NaN where unusable
    train_mask: np.ndarray  # (W, T)
    val_mask: np.ndarray  # (W, T)


def _build_window_tensors(data, normalizer, config: LstmConfig) -> _WindowTensors:
    seq = config.sequence_length
    rows_i, rows_t, rows_tm, rows_vm = [], [], [], []
    for d in data:
        xn = normalizer.transform_matrix(d.inputs_raw)
        yn = np.where(np.isnan(d.targets_c), np.nan, normalizer.transform_target(np.nan_to_num(d.targets_c)))
        observed = ~np.isnan(d.targets_c)
        for w in make_windows(d.n_dates, seq, config.window_shift):
            span = slice(w.offset, w.offset + seq - w.pad)
            xi = np.zeros((seq, xn.shape[1]))
            ti = np.full(seq, np.nan)
            om = np.zeros(seq, dtype=bool)
            vm = np.zeros(seq, dtype=bool)
            xi[w.pad :] = xn[span]
            ti[w.pad :] = yn[span]
            om[w.pad :] = observed[span]
            vm[w.pad :] = d.val_mask[span]
            maskable = np.zeros(seq, dtype=bool)
            maskable[w.maskable_from :] = True
            rows_i.append(xi)
            rows_t.append(ti)
            rows_tm.append(om & ~vm & maskable)
            rows_vm.append(om & vm & maskable)
    return _WindowTensors(
        inputs=np.stack(rows_i),
        targets=np.stack(rows_t),
        train_mask=np.stack(rows_tm),
        val_mask=np.stack(rows_vm),
    )


def _masked_loss_over(params, tensors, mask, batch_size) -> float:
    """Inference-mode masked MSE over all windows, computed in batches."""
    total, count = 0.0, 0
    for start in range(0, tensors.inputs.shape[0], batch_size):
        stop = start + batch_size
        sub_mask = mask[start:stop]
        if not sub_mask.any():
            continue
        preds = forward_batch(params, tensors.inputs[start:stop])[:, :, 0]
        total += masked_mse(preds, tensors.targets[start:stop], sub_mask, reduction="sum")
        count += int(sub_mask.sum())
    return total / count if count else float("nan")


def train(
    data: list[SiteTrainingData],
    feature_names,
    lstm_config: LstmConfig,
    train_config: TrainConfig,
    rng: Rng,
    normalizer: Normalizer | None = None,
) -> tuple[LstmParams, Normalizer, list[TrainLogEntry]]:
    """Train one model to early-stopping convergence.

    Returns the parameters from the epoch with minimum validation loss, the
    normalizer used (fitted here when not supplied), and the per-epoch log.

    Raises:
        TrainingDivergedError: on a non-finite training loss.
        ValueError: when the validation split selects no usable cells.
    """
    if not data:
        raise ValueError("no training sites")
    if normalizer is None:
        normalizer = fit_pool_normalizer(data, feature_names)
    tensors = _build_window_tensors(data, normalizer, lstm_config)
    if not tensors.train_mask.any():
        raise ValueError("no usable training cells after masking")
    if not tensors.val_mask.any():
        raise ValueError("validation split selected no usable cells")

    init_rng = rng.child_named("init")
    loop_rng = rng.child_named("loop")
    params = LstmParams.init(len(normalizer.kept_names), lstm_config, init_rng)
    optimizer = AdamW(params, train_config.learning_rate, train_config.weight_decay)

    n_windows = tensors.inputs.shape[0]
    best_val = float("inf")
    best_params = params.copy()
    since_best = 0
    log: list[TrainLogEntry] = []
    for epoch in range(1, train_config.max_epochs + 1):
        order = loop_rng.generator.permutation(n_windows)
        epoch_loss_sum, epoch_cells = 0.0, 0
        for start in range(0, n_windows, train_config.batch_size):
            pick = order[start : start + train_config.batch_size]
            mask = tensors.train_mask[pick]
            if not mask.any():
                continue
            preds, cache = forward_batch(
                params,
                tensors.inputs[pick],
                dropout_rate=lstm_config.dropout_rate,
                rng=loop_rng,
                return_cache=True,
            )
            targets = tensors.targets[pick]
            loss = masked_mse(preds[:, :, 0], targets, mask)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}, window batch starting {start}"
                )
            dpred = masked_mse_gradient(preds[:, :, 0], targets, mask)[:, :, None]
            optimizer.step(backward_batch(params, cache, dpred))
            epoch_loss_sum += loss * mask.sum()
            epoch_cells += int(mask.sum())
        train_loss = epoch_loss_sum / epoch_cells
        val_loss = _masked_loss_over(params, tensors, tensors.val_mask, train_config.batch_size)
        log.append(TrainLogEntry(epoch=epoch, train_loss=train_loss, val_loss=val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= train_config.patience:
                break
    return best_params, normalizer, log


@dataclass
class EnsembleMember:
    params: LstmParams
    normalizer: Normalizer
    config: LstmConfig
    preset_index: int


@dataclass
class EnsembleModel:
    """Mean-of-members predictor in degrees C."""

    members: list[EnsembleMember]
    feature_names: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.members)

    def member_predictions(self, inputs_raw: np.ndarray) -> np.ndarray:
        """(n_members, n_dates) per-member predictions in C."""
        return np.stack(
            [predict_site_series(m.params, m.config, m.normalizer, inputs_raw) for m in self.members]
        )

    def predict_series(self, inputs_raw: np.ndarray) -> np.ndarray:
        """Ensemble prediction: arithmetic mean of member predictions in C."""
        return self.member_predictions(inputs_raw).mean(axis=0)

    def save(self, directory) -> None:
        """Persist every member (weights, normalizer, config) under ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": 1,
            "feature_names": list(self.feature_names),
            "members": [
                {
                    "preset_index": m.preset_index,
                    "config": {
                        "hidden_size": m.config.hidden_size,
                        "num_layers": m.config.num_layers,
                        "dropout_rate": m.config.dropout_rate,
                        "sequence_length": m.config.sequence_length,
                        "window_shift": m.config.window_shift,
                    },
                }
                for m in self.members
            ],
        }
        with open(directory / "ensemble.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        for k, m in enumerate(self.members):
            m.params.save(str(directory / f"member{k}"))
            m.normalizer.save(str(directory / f"member{k}.norm.json"))

    @classmethod
    def load(cls, directory) -> "EnsembleModel":
        directory = Path(directory)
        with open(directory / "ensemble.json") as fh:
            manifest = json.load(fh)
        members = []
        for k, entry in enumerate(manifest["members"]):
            members.append(
                EnsembleMember(
                    params=LstmParams.load(str(directory / f"member{k}")),
                    normalizer=Normalizer.load(str(directory / f"member{k}.norm.json")),
                    config=LstmConfig(**entry["config"]),
                    preset_index=entry["preset_index"],
                )
            )
        return cls(members=members, feature_names=tuple(manifest["feature_names"]))


def predict_site_series(
    params: LstmParams, config: LstmConfig, normalizer: Normalizer, inputs_raw: np.ndarray
) -> np.ndarray:
    """Predict a full site series in C by stitching window predictions.

    Each date takes its value from the latest window allowed to predict it
    (windows tile the axis with their maskable halves; the end-snapped window
    overrides the overlap it creates).
    """
    n = inputs_raw.shape[0]
    xn = normalizer.transform_matrix(inputs_raw)
    windows = make_windows(n, config.sequence_length, config.window_shift)
    seq = config.sequence_length
    batch = np.zeros((len(windows), seq, xn.shape[1]))
    for i, w in enumerate(windows):
        batch[i, w.pad :] = xn[w.offset : w.offset + seq - w.pad]
    preds = forward_batch(params, batch)[:, :, 0]
    out = np.full(n, np.nan)
    for i, w in enumerate(windows):
        pos = np.arange(w.maskable_from, seq)
        out[w.offset + pos - w.pad] = preds[i, pos]
    return normalizer.inverse_transform_target(out)


def train_ensemble(
    data: list[SiteTrainingData],
    feature_names,
    lstm_config: LstmConfig,
    train_config: TrainConfig,
    rng: Rng,
    n_members: int = 5,
    presets: tuple[HyperPreset, ...] = HYPERPARAMETER_PRESETS,
    preset_fields: tuple[str, ...] = ALL_PRESET_FIELDS,
    parallel_map=None,
) -> EnsembleModel:
    """Train ``n_members`` models, member k adopting preset k mod len(presets).

    ``preset_fields`` selects which preset entries override the base configs;
    the full set reproduces the tuned architectures, while desk-scale runs
    may restrict it to the regularization fields.  ``parallel_map`` may be a
    map-like callable (e.g. from :mod:`streamtemp.parallel`) used to train
    members concurrently; results are order-stable either way.
    """
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    normalizer = fit_pool_normalizer(data, feature_names)

    def build_member(k: int) -> EnsembleMember:
        preset = presets[k % len(presets)]
        lc = replace(lstm_config)
        tc = replace(train_config, hyper_preset=k % len(presets))
        for fname in preset_fields:
            value = getattr(preset, fname)
            if fname in ("hidden_size", "num_layers", "dropout_rate"):
                lc = replace(lc, **{fname: value})
            else:
                tc = replace(tc, **{fname: value})
        params, norm, _log = train(data, feature_names, lc, tc, rng.child(k), normalizer=normalizer)
        return EnsembleMember(params=params, normalizer=norm, config=lc, preset_index=k % len(presets))

    mapper = parallel_map if parallel_map is not None else lambda fn, items: [fn(i) for i in items]
    members = list(mapper(build_member, range(n_members)))
    return EnsembleModel(members=members, feature_names=tuple(feature_names))
