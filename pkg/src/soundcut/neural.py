"""Two-hidden-layer tanh MLP with L0 gates on the weights and a BinMask gate
vector on the inputs.

Gates are hard in the forward pass (`b = 1[theta >= 0]`) and use the
derivative of `sigmoid(theta / temperature)` in the backward pass. The L0
penalty is the smooth surrogate `sum(sigmoid(theta / temperature))`. The
smoothed input mask is an exponential moving average of the hard gates,
updated once per training step.
"""
import dataclasses
import enum
import logging
import typing as t

import more_itertools as mitt
import numpy as np
import scipy.sparse
from scipy.special import expit, logit
from tqdm import tqdm

from . import errors, metrics
from .attribution import DifferentiableFn
from .compgraph import CompGraph, Cut, GraphBuilder, OpSpec, mask_cut
from .core import ConfigMixin, model
from .generic_structs import IndexSet

logger = logging.getLogger(__name__)

GATE_INIT_PROB = 0.9
PROB_CLIP = 1e-9


class Gating(enum.Enum):
    HARD = "hard"
    OFF = "off"


@model
class MlpConfig(ConfigMixin):
    n_inputs: int
    hidden: t.Tuple[int, int] = (64, 20)
    seed: int = 0
    gate_temperature: float = 1.0
    ema_decay: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.n_inputs < 1:
            raise errors.ConfigError("the network needs at least one input")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise errors.ConfigError(
                f"expected two positive hidden sizes, got {self.hidden}"
            )
        if self.gate_temperature <= 0:
            raise errors.ConfigError("gate temperature must be positive")
        if not 0 < self.ema_decay < 1:
            raise errors.ConfigError("ema decay must be in (0, 1)")


@model
class TrainConfig(ConfigMixin):
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 30
    lambda_mask: float = 1e-3
    lambda_weight: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gate_lr_scale: float = 10.0
    seed: int = 0
    train_input_mask: bool = True
    resample_cutoffs: bool = True
    show_progress: bool = False

    def __post_init__(self):
        positive = {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "eps": self.eps,
            "gate_lr_scale": self.gate_lr_scale,
        }
        for name, value in positive.items():
            if not value > 0:
                raise errors.ConfigError(f"{name} must be positive, got {value}")
        if self.lambda_mask < 0 or self.lambda_weight < 0:
            raise errors.ConfigError("L0 coefficients must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise errors.ConfigError("Adam betas must be in (0, 1)")


@dataclasses.dataclass
class GateVector:
    theta: np.ndarray
    temperature: float = 1.0
    ema: t.Optional[np.ndarray] = None
    ema_decay: float = 0.99
    n_updates: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.ema is None:
            self.ema = self.hard()
        self.ema = np.asarray(self.ema, dtype=float)

    @classmethod
    def opened(
        cls,
        shape,
        prob: float = GATE_INIT_PROB,
        temperature: float = 1.0,
        ema_decay: float = 0.99,
    ) -> "GateVector":
        theta = np.full(shape, float(logit(prob)) * temperature)
        return cls(theta=theta, temperature=temperature, ema_decay=ema_decay)

    def hard(self) -> np.ndarray:
        return (self.theta >= 0).astype(float)

    def prob(self) -> np.ndarray:
        return expit(self.theta / self.temperature)

    def surrogate_grad(self) -> np.ndarray:
        """d/dtheta sigmoid(theta / temperature)."""
        p = self.prob()
        return p * (1 - p) / self.temperature

    def penalty(self) -> float:
        return float(self.prob().sum())

    def update_ema(self):
        self.ema = self.ema_decay * self.ema + (1 - self.ema_decay) * self.hard()
        self.n_updates += 1

    def copy(self) -> "GateVector":
        return dataclasses.replace(self, theta=self.theta.copy(), ema=self.ema.copy())


LAYERS = ("1", "2", "3")


@dataclasses.dataclass
class MlpModel:
    config: MlpConfig
    weights: t.List[np.ndarray]
    biases: t.List[np.ndarray]
    weight_gates: t.List[GateVector]
    input_mask: GateVector
    input_scale: np.ndarray

    @property
    def n_inputs(self) -> int:
        return self.config.n_inputs

    def predict(self, X, keep: t.Optional[np.ndarray] = None) -> np.ndarray:
        return forward(self, X, Gating.HARD, keep=keep)

    def parameters(self) -> t.Dict[str, np.ndarray]:
        """Trainable arrays by name. Updating them in place updates the model."""
        params = {}
        layers = zip(LAYERS, self.weights, self.biases, self.weight_gates)
        for layer, W, b, gate in layers:
            params[f"W{layer}"] = W
            params[f"b{layer}"] = b
            params[f"theta_W{layer}"] = gate.theta
        params["theta_mask"] = self.input_mask.theta
        return params

    def copy(self) -> "MlpModel":
        return MlpModel(
            config=self.config,
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
            weight_gates=[g.copy() for g in self.weight_gates],
            input_mask=self.input_mask.copy(),
            input_scale=self.input_scale.copy(),
        )


def fit_input_scale(X) -> np.ndarray:
    """`1 / max|x|` per column, 1 for all-zero columns."""
    if scipy.sparse.issparse(X):
        max_abs = np.asarray(abs(X).max(axis=0).todense()).ravel()
    else:
        max_abs = np.abs(np.asarray(X, dtype=float)).max(axis=0)
    scale = np.ones_like(max_abs, dtype=float)
    nonzero = max_abs > 0
    scale[nonzero] = 1.0 / max_abs[nonzero]
    return scale


def init_model(config: MlpConfig, X=None) -> MlpModel:
    """Glorot-uniform weights, zero biases, every gate opened at
    sigmoid(theta) = 0.9.
    """
    rng = np.random.default_rng(config.seed)
    sizes = [config.n_inputs, *config.hidden, 1]

    weights, biases, gates = [], [], []
    for fan_in, fan_out in mitt.pairwise(sizes):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
        gates.append(
            GateVector.opened(
                (fan_in, fan_out),
                temperature=config.gate_temperature,
                ema_decay=config.ema_decay,
            )
        )

    if X is not None:
        if X.shape[1] != config.n_inputs:
            raise errors.ValidationError(
                f"config declares {config.n_inputs} inputs, data has {X.shape[1]}"
            )
        scale = fit_input_scale(X)
    else:
        scale = np.ones(config.n_inputs)

    return MlpModel(
        config=config,
        weights=weights,
        biases=biases,
        weight_gates=gates,
        input_mask=GateVector.opened(
            config.n_inputs,
            temperature=config.gate_temperature,
            ema_decay=config.ema_decay,
        ),
        input_scale=scale,
    )


# ------- forward / backward ---------


@model
class _Effective:
    """Weights after gating, with the input scale and mask folded into the
    first layer.
    """

    column_factor: np.ndarray
    first: np.ndarray
    gated: t.Tuple[np.ndarray, ...]


def _effective(model: MlpModel, gating: Gating, keep: t.Optional[np.ndarray]):
    if gating == Gating.HARD:
        in_gate = model.input_mask.hard()
        gated = tuple(W * g.hard() for W, g in zip(model.weights, model.weight_gates))
    elif gating == Gating.OFF:
        in_gate = np.ones(model.n_inputs)
        gated = tuple(model.weights)
    else:
        raise errors.ValidationError(f"unknown gating {gating}")

    if keep is not None:
        keep = np.asarray(keep, dtype=float)
        if keep.shape != (model.n_inputs,):
            raise errors.ValidationError(
                f"keep mask has shape {keep.shape}, expected ({model.n_inputs},)"
            )
        in_gate = in_gate * keep

    column_factor = model.input_scale * in_gate
    return _Effective(
        column_factor=column_factor,
        first=column_factor[:, None] * gated[0],
        gated=gated,
    )


def _check_batch(model: MlpModel, X):
    if X.ndim != 2 or X.shape[1] != model.n_inputs:
        raise errors.ValidationError(
            f"model reads {model.n_inputs} columns, batch has shape {X.shape}"
        )


def _as_batch(X):
    if scipy.sparse.issparse(X):
        return X.tocsr()
    return np.atleast_2d(np.asarray(X, dtype=float))


def _hidden(model: MlpModel, X, eff: _Effective):
    z1 = np.asarray(X @ eff.first) + model.biases[0]
    h1 = np.tanh(z1)
    z2 = h1 @ eff.gated[1] + model.biases[1]
    h2 = np.tanh(z2)
    logits = (h2 @ eff.gated[2] + model.biases[2]).ravel()
    return h1, h2, logits


def forward(
    model: MlpModel,
    X,
    gating: Gating = Gating.HARD,
    keep: t.Optional[np.ndarray] = None,
) -> np.ndarray:
    """Probabilities in (0, 1) for every row of `X`."""
    X = _as_batch(X)
    _check_batch(model, X)
    _, _, logits = _hidden(model, X, _effective(model, gating, keep))
    return expit(logits)


def binary_cross_entropy(p, y) -> float:
    p = np.clip(np.asarray(p, dtype=float), PROB_CLIP, 1 - PROB_CLIP)
    y = np.asarray(y, dtype=float)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def loss(
    model: MlpModel,
    X,
    y,
    train_config: TrainConfig,
) -> t.Tuple[float, t.Dict[str, np.ndarray]]:
    """Mean cross-entropy plus the L0 surrogate penalties, and the gradient
    of that total for every array in `model.parameters()`.
    """
    X = _as_batch(X)
    _check_batch(model, X)
    y = np.asarray(y, dtype=float).ravel()
    if not np.isin(y, (0, 1)).all():
        raise errors.ValidationError("labels must be 0 or 1")

    eff = _effective(model, Gating.HARD, keep=None)
    h1, h2, logits = _hidden(model, X, eff)
    n_rows = X.shape[0]

    cross_entropy = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    mask_penalty = model.input_mask.penalty() if train_config.train_input_mask else 0.0
    weight_penalty = sum(g.penalty() for g in model.weight_gates)
    total = (
        cross_entropy
        + train_config.lambda_mask * mask_penalty
        + train_config.lambda_weight * weight_penalty
    )
    if not np.isfinite(total):
        raise errors.NumericError(f"non-finite loss {total}")

    d_logits = ((expit(logits) - y) / n_rows)[:, None]
    g_w3 = h2.T @ d_logits
    g_b3 = d_logits.sum(axis=0)

    d_z2 = (d_logits @ eff.gated[2].T) * (1 - h2**2)
    g_w2 = h1.T @ d_z2
    g_b2 = d_z2.sum(axis=0)

    d_z1 = (d_z2 @ eff.gated[1].T) * (1 - h1**2)
    g_first = np.asarray(X.T @ d_z1)
    g_b1 = d_z1.sum(axis=0)

    # Undo the folding of scale and mask into the first layer.
    g_w1 = eff.column_factor[:, None] * g_first
    g_in_gate = (g_first * eff.gated[0]).sum(axis=1) * model.input_scale

    grads = {}
    for layer, g_w_eff, g_b, W, gate in zip(
        LAYERS,
        (g_w1, g_w2, g_w3),
        (g_b1, g_b2, g_b3),
        model.weights,
        model.weight_gates,
    ):
        sg = gate.surrogate_grad()
        grads[f"W{layer}"] = g_w_eff * gate.hard()
        grads[f"b{layer}"] = g_b
        grads[f"theta_W{layer}"] = (
            g_w_eff * W * sg + train_config.lambda_weight * sg
        )

    if train_config.train_input_mask:
        sg = model.input_mask.surrogate_grad()
        grads["theta_mask"] = g_in_gate * sg + train_config.lambda_mask * sg
    else:
        grads["theta_mask"] = np.zeros_like(model.input_mask.theta)

    return total, grads


class Adam:
    """Adaptive-moment updates over named arrays, applied in place."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: t.Dict[str, np.ndarray] = {}
        self._v: t.Dict[str, np.ndarray] = {}

    def step(
        self,
        params: t.Mapping[str, np.ndarray],
        grads: t.Mapping[str, np.ndarray],
        learning_rates: t.Mapping[str, float],
    ):
        self.step_count += 1
        bias1 = 1 - self.beta1**self.step_count
        bias2 = 1 - self.beta2**self.step_count

        for name, grad in grads.items():
            m = self._m.setdefault(name, np.zeros_like(grad))
            v = self._v.setdefault(name, np.zeros_like(grad))
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad**2
            params[name] -= (
                learning_rates[name] * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            )


# ------- training ---------


@model
class Dataset:
    X: t.Any
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=int).ravel())
        if self.X.shape[0] != self.y.size:
            raise errors.ValidationError(
                f"{self.X.shape[0]} rows for {self.y.size} labels"
            )

    def __len__(self):
        return self.y.size


@model
class EpochRecord:
    epoch: int
    loss: float
    train_auc: float


MinibatchRefresh = t.Callable[[np.ndarray, np.random.Generator], t.Any]


def train(
    model: MlpModel,
    dataset: Dataset,
    train_config: TrainConfig,
    minibatch_refresh: t.Optional[MinibatchRefresh] = None,
) -> t.Tuple[MlpModel, t.List[EpochRecord]]:
    """Minibatch Adam training. `minibatch_refresh(row_indices, rng)`, when
    given, regenerates the feature rows of each batch. Returns a trained copy
    and the per-epoch history.
    """
    if len(dataset) == 0:
        raise errors.TrainingError("cannot train on an empty dataset")
    if np.unique(dataset.y).size < 2:
        raise errors.TrainingError(
            "training data holds a single class, AUC is undefined"
        )

    model = model.copy()
    rng = np.random.default_rng(train_config.seed)
    optimizer = Adam(train_config.beta1, train_config.beta2, train_config.eps)
    params = model.parameters()

    gate_lr = train_config.learning_rate * train_config.gate_lr_scale
    learning_rates = {
        name: gate_lr if name.startswith("theta") else train_config.learning_rate
        for name in params
    }

    X = dataset.X
    if scipy.sparse.issparse(X):
        X = X.tocsr()
    history = []

    for epoch in tqdm(
        range(train_config.epochs),
        desc="epoch",
        disable=not train_config.show_progress,
    ):
        order = rng.permutation(len(dataset))
        batch_losses = []
        for batch in mitt.chunked(order, train_config.batch_size):
            rows = np.asarray(batch)
            if minibatch_refresh is not None:
                X_batch = minibatch_refresh(rows, rng)
            else:
                X_batch = X[rows]

            batch_loss, grads = loss(model, X_batch, dataset.y[rows], train_config)
            if not train_config.train_input_mask:
                del grads["theta_mask"]
            optimizer.step(params, grads, learning_rates)

            model.input_mask.update_ema()
            for gate in model.weight_gates:
                gate.update_ema()
            batch_losses.append(batch_loss)

        record = EpochRecord(
            epoch=epoch,
            loss=float(np.mean(batch_losses)),
            train_auc=metrics.auc(forward(model, X, Gating.HARD), dataset.y),
        )
        history.append(record)
        logger.debug(
            "epoch %d: loss %.5f, train AUC %.4f", epoch, record.loss, record.train_auc
        )

    return model, history


def binmask_select(model: MlpModel) -> IndexSet:
    """Features whose smoothed mask is at least 0.5."""
    if model.input_mask.n_updates == 0:
        raise errors.StalenessError(
            "the smoothed mask was never updated, train the model first"
        )
    return IndexSet.from_mask(model.input_mask.ema >= 0.5)


# ------- exports ---------


def input_id(i: int) -> str:
    return f"x{i}"


def to_compgraph(
    model: MlpModel, selected: t.Optional[t.Iterable[int]] = None
) -> t.Tuple[CompGraph, Cut]:
    """Affine/Tanh/Sigmoid graph computing `forward(hard)` with the columns
    outside `selected` zeroed, gated and cut by `mask_cut`. `selected`
    defaults to the inputs whose hard gate is open.
    """
    if selected is None:
        selected = IndexSet.from_mask(model.input_mask.hard())
    selected = IndexSet(selected)
    if selected and not (0 <= selected[0] and selected[-1] < model.n_inputs):
        raise errors.InvalidSelectionError(
            f"{selected} does not fit a model with {model.n_inputs} inputs"
        )

    eff = _effective(model, Gating.HARD, keep=None)
    builder = GraphBuilder()
    previous = [builder.add_input(input_id(i)) for i in range(model.n_inputs)]

    for layer, (W, b) in enumerate(zip((eff.first, *eff.gated[1:2]), model.biases), 1):
        current = []
        for j in range(W.shape[1]):
            op = OpSpec.affine(W[:, j], b[j])
            z = builder.add_vertex(f"h{layer}.z{j}", op, previous)
            current.append(builder.add_vertex(f"h{layer}.a{j}", OpSpec.tanh(), [z]))
        previous = current

    logit_id = builder.add_vertex(
        "out.z", OpSpec.affine(eff.gated[2][:, 0], model.biases[2][0]), previous
    )
    builder.add_output("out", OpSpec.sigmoid(), [logit_id])

    return mask_cut(builder.build(), [input_id(i) for i in selected])


class MlpFn(DifferentiableFn):
    """The trained network's probability, `forward(hard)`, as a function of a
    single input vector, with analytic input gradients.
    """

    def __init__(self, model: MlpModel):
        self.model = model.copy()
        self.dim = model.n_inputs
        self._eff = _effective(self.model, Gating.HARD, keep=None)

    @property
    def dead_dims(self) -> IndexSet:
        """Inputs with no path into the network."""
        return IndexSet.from_mask(np.all(self._eff.first == 0.0, axis=1))

    def value(self, x) -> float:
        _, _, logits = _hidden(self.model, _as_batch(x), self._eff)
        return float(expit(logits[0]))

    def values(self, X) -> np.ndarray:
        _, _, logits = _hidden(self.model, _as_batch(X), self._eff)
        return expit(logits)

    def gradient(self, x) -> np.ndarray:
        return self.gradients(x)[0]

    def gradients(self, X) -> np.ndarray:
        X = _as_batch(X)
        h1, h2, logits = _hidden(self.model, X, self._eff)
        p = expit(logits)
        d_logits = (p * (1 - p))[:, None]
        d_z2 = (d_logits @ self._eff.gated[2].T) * (1 - h2**2)
        d_z1 = (d_z2 @ self._eff.gated[1].T) * (1 - h1**2)
        return d_z1 @ self._eff.first.T
