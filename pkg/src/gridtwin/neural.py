"""A from-scratch multilayer perceptron regressing injections on states.

Hidden layers use tanh, the output layer is linear.  Inputs and outputs are
z-scored with statistics from the training range; the model stores those so
that :func:`predict` and :func:`chain_rule_jacobian` work in physical units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, TrainingDiverged
from .powerflow import JacobianMatrix, Provenance, StateIndexMap
from .telemetry import TelemetrySeries

ACTIVATION = "tanh"
# a loss this many times above the initial one counts as divergence
DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class MlpModel:
    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    seed: int = 0
    index_map: StateIndexMap | None = field(default=None, compare=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise DimensionError(f"invalid layer sizes {sizes}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise DimensionError("need one weight matrix and bias vector per layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise DimensionError(f"layer {k}: W {w.shape}, b {b.shape} do not chain "
                                     f"{sizes[k]} -> {sizes[k + 1]}")
        for name, vec, n in (("x_mean", self.x_mean, sizes[0]), ("x_scale", self.x_scale, sizes[0]),
                             ("y_mean", self.y_mean, sizes[-1]), ("y_scale", self.y_scale, sizes[-1])):
            if np.shape(vec) != (n,):
                raise DimensionError(f"{name} must have length {n}")
        if self.index_map is not None and not (sizes[0] == sizes[-1] == self.index_map.size):
            raise DimensionError("index map size must equal the input and output sizes")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class TrainConfig:
    """Half-open, 0-based sample ranges; the defaults cover a 9600-sample series."""

    train_range: tuple[int, int] = (0, 8400)
    test_range: tuple[int, int] = (8400, 9600)
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        (a, b), (c, d) = self.train_range, self.test_range
        if not (0 <= a < b and 0 <= c < d):
            raise ValueError("ranges must be nonempty and nonnegative")
        if a < d and c < b:
            raise ValueError(f"train {self.train_range} and test {self.test_range} overlap")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")


@dataclass(frozen=True)
class TrainResult:
    model: MlpModel
    losses: list[float]


def init_model(layer_sizes, seed: int = 0, x_mean=None, x_scale=None, y_mean=None,
               y_scale=None, index_map: StateIndexMap | None = None) -> MlpModel:
    """LeCun-uniform weights ``U(±sqrt(3/fan_in))``, zero biases."""
    sizes = tuple(int(s) for s in layer_sizes)
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(3.0 / fan_in)
        ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    n0, nl = sizes[0], sizes[-1]
    return MlpModel(sizes, tuple(ws), tuple(bs),
                    np.zeros(n0) if x_mean is None else np.asarray(x_mean, float),
                    np.ones(n0) if x_scale is None else np.asarray(x_scale, float),
                    np.zeros(nl) if y_mean is None else np.asarray(y_mean, float),
                    np.ones(nl) if y_scale is None else np.asarray(y_scale, float),
                    seed, index_map)


def _forward(model: MlpModel, z: np.ndarray):
    """Rows of ``z`` are (scaled) samples; returns the activations of every layer."""
    acts = [z]
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        pre = acts[-1] @ w.T + b
        acts.append(pre if k == last else np.tanh(pre))
    return acts


def predict(model: MlpModel, x) -> np.ndarray:
    """Forward pass in physical units; ``x`` is one state or a (samples × p) array."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (model.n_in,) or x.ndim > 2:
        raise DimensionError(f"input of shape {x.shape} does not fit {model.n_in} features")
    z = (x - model.x_mean) / model.x_scale
    out = _forward(model, np.atleast_2d(z))[-1]
    y = out * model.y_scale + model.y_mean
    return y[0] if x.ndim == 1 else y


def loss_and_gradients(model: MlpModel, z: np.ndarray, t: np.ndarray):
    """Mean squared error over all entries of a scaled batch, and its gradients.

    Returns ``(loss, dW, db)`` with ``dW``/``db`` lists aligned to the layers.
    """
    acts = _forward(model, z)
    err = acts[-1] - t
    loss = float(np.mean(err**2))
    delta = 2.0 * err / err.size
    dws, dbs = [], []
    for k in range(len(model.weights) - 1, -1, -1):
        dws.append(delta.T @ acts[k])
        dbs.append(delta.sum(axis=0))
        if k:
            delta = (delta @ model.weights[k]) * (1.0 - acts[k] ** 2)
    return loss, dws[::-1], dbs[::-1]


def _fit_scaling(data: np.ndarray):
    mean = data.mean(axis=0)
    scale = data.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


def _sgd(params, lr):
    def step(grads):
        for prm, g in zip(params, grads):
            prm -= lr * g
    return step


def _adam(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m = [np.zeros_like(prm) for prm in params]
    v = [np.zeros_like(prm) for prm in params]
    count = [0]

    def step(grads):
        count[0] += 1
        c1 = 1.0 - beta1 ** count[0]
        c2 = 1.0 - beta2 ** count[0]
        for prm, g, mk, vk in zip(params, grads, m, v):
            mk *= beta1
            mk += (1.0 - beta1) * g
            vk *= beta2
            vk += (1.0 - beta2) * g * g
            prm -= lr * (mk / c1) / (np.sqrt(vk / c2) + eps)
    return step


def train(series: TelemetrySeries, cfg: TrainConfig = TrainConfig(),
          layer_sizes=None) -> TrainResult:
    """Mini-batch gradient descent on the scaled mean squared error.

    ``losses[0]`` is the training loss of the initial model and ``losses[e]``
    the loss after epoch ``e``.  Raises :class:`TrainingDiverged` as soon as a
    batch loss is not finite or exceeds ``DIVERGENCE_FACTOR`` times the
    initial loss.
    """
    p = series.index_map.size
    sizes = tuple(layer_sizes) if layer_sizes is not None else (p, 50, 50, 50, p)
    if sizes[0] != p or sizes[-1] != p:
        raise DimensionError(f"layer sizes {sizes} must start and end with p={p}")
    a, b = cfg.train_range
    if b > series.samples or cfg.test_range[1] > series.samples:
        raise DimensionError(f"ranges exceed the {series.samples}-sample series")
    x = series.x_series[:, a:b].T
    y = series.y_series[:, a:b].T
    xm, xs = _fit_scaling(x)
    ym, ys = _fit_scaling(y)
    z, t = (x - xm) / xs, (y - ym) / ys

    model = init_model(sizes, cfg.seed, xm, xs, ym, ys, series.index_map)
    ws = [w.copy() for w in model.weights]
    bs = [v.copy() for v in model.biases]
    rng = np.random.default_rng([cfg.seed, 1])
    n = z.shape[0]

    def current():
        return MlpModel(sizes, tuple(ws), tuple(bs), xm, xs, ym, ys, cfg.seed, series.index_map)

    params = ws + bs
    step = _sgd(params, cfg.learning_rate) if cfg.optimizer == "sgd" else \
        _adam(params, cfg.learning_rate)
    losses = [loss_and_gradients(current(), z, t)[0]]
    limit = DIVERGENCE_FACTOR * max(losses[0], np.finfo(float).tiny)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, dws, dbs = loss_and_gradients(current(), z[idx], t[idx])
            if not np.isfinite(loss) or loss > limit:
                raise TrainingDiverged(f"training diverged in epoch {epoch} (batch loss {loss:.3e})",
                                       epoch)
            step(dws + dbs)
        with np.errstate(over="ignore", invalid="ignore"):
            epoch_loss = loss_and_gradients(current(), z, t)[0]
        if not np.isfinite(epoch_loss) or epoch_loss > limit:
            raise TrainingDiverged(f"training diverged in epoch {epoch} (loss {epoch_loss:.3e})",
                                   epoch)
        losses.append(epoch_loss)
    return TrainResult(current(), losses)


def network_jacobian(model: MlpModel, x) -> np.ndarray:
    """d predict / d x at one state, in physical units: ``Dy · Wᴸ Γ ⋯ Γ W¹ · Dx⁻¹``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_in,):
        raise DimensionError(f"state of length {x.shape} does not fit {model.n_in} features")
    acts = _forward(model, ((x - model.x_mean) / model.x_scale)[None, :])
    j = model.weights[0]
    for k in range(1, len(model.weights)):
        gamma = 1.0 - acts[k][0] ** 2
        j = model.weights[k] @ (gamma[:, None] * j)
    return model.y_scale[:, None] * j / model.x_scale[None, :]


def chain_rule_jacobian(model: MlpModel, x) -> JacobianMatrix:
    """The network's Jacobian at ``x`` in the V-scaled convention of the analytic one.

    Models without an index map get a generic θ-only layout, so no column is rescaled.
    """
    raw = network_jacobian(model, x)
    im = model.index_map
    if im is None:
        if model.n_in != model.n_out:
            raise DimensionError("chain-rule Jacobian needs a square model")
        return JacobianMatrix(raw, StateIndexMap(tuple(range(1, model.n_in + 1)), ()),
                              Provenance.CHAIN_RULE)
    nth = len(im.theta_positions)
    return JacobianMatrix(raw, im, Provenance.CHAIN_RULE, v_scaled=False).scaled_by(
        np.asarray(x, float)[nth:])


def relative_rmse(model: MlpModel, series: TelemetrySeries, rows, sample_range) -> np.ndarray:
    """Per-row RMSE over ``sample_range`` divided by the std of the true trace there."""
    a, b = sample_range
    pred = predict(model, series.x_series[:, a:b].T).T
    truth = series.y_series[:, a:b]
    rows = list(rows)
    rmse = np.sqrt(np.mean((pred[rows] - truth[rows]) ** 2, axis=1))
    return rmse / truth[rows].std(axis=1)


# ---------------------------------------------------------------------------
# persistence


def model_to_dict(model: MlpModel) -> dict:
    doc = {
        "layer_sizes": list(model.layer_sizes),
        "activation": ACTIVATION,
        "output_activation": "identity",
        "seed": model.seed,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "scaling": {"x_mean": model.x_mean.tolist(), "x_scale": model.x_scale.tolist(),
                    "y_mean": model.y_mean.tolist(), "y_scale": model.y_scale.tolist()},
    }
    if model.index_map is not None:
        doc["index_map"] = {"theta": list(model.index_map.theta_positions),
                            "v": list(model.index_map.v_positions)}
    return doc


def model_from_dict(doc: dict) -> MlpModel:
    if doc.get("activation", ACTIVATION) != ACTIVATION:
        raise ValueError(f"unsupported activation {doc['activation']!r}")
    im = doc.get("index_map")
    sc = doc["scaling"]
    return MlpModel(tuple(doc["layer_sizes"]),
                    tuple(np.array(w, dtype=float) for w in doc["weights"]),
                    tuple(np.array(b, dtype=float) for b in doc["biases"]),
                    np.array(sc["x_mean"], float), np.array(sc["x_scale"], float),
                    np.array(sc["y_mean"], float), np.array(sc["y_scale"], float),
                    int(doc.get("seed", 0)),
                    StateIndexMap(tuple(im["theta"]), tuple(im["v"])) if im else None)


def save_model(model: MlpModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


def load_model(path) -> MlpModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
