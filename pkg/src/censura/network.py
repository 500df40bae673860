"""Small feed-forward regression engine with reverse-mode gradients.

Supports ReLU hidden stacks with dropout, optional variational (mean, rho)
weight posteriors with reparameterized sampling, three output heads
(scalar, gaussian, evidential), the Adam optimizer with coupled weight
decay, a reduce-on-plateau learning-rate schedule and early stopping with
best-state restoration. Everything runs in float64 on numpy, determined
entirely by the run seed.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import serialize
from .errors import NumericError, SearchError, TrainingError
from .losses import (
    BatchTargets,
    EvidentialOutput,
    bbb_objective,
    censored_mse,
    censored_nll,
    evidential_loss,
    kl_diag_gaussians,
)
from .numerics import VARIANCE_FLOOR, GaussianParams, logistic, softplus
from .rng import derive_rng, standard_normal

MODES = ("train", "eval", "mc_dropout")
HEAD_WIDTHS = {"scalar": 1, "gaussian": 2, "evidential": 4}

# softplus output below this is treated as zero-gradient clamped territory
# for the strictly-positive evidential parameters
_POSITIVE_FLOOR = 1e-12


@dataclass
class NetworkSpec:
    """Architecture description: widths, dropout, head and variationality."""

    input_dim: int
    hidden_layers: int = 2
    hidden_dim: int = 64
    decreasing_dim: bool = False
    dropout_rate: float = 0.0
    head: str = "scalar"
    variational: bool = False

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_layers < 1 or self.hidden_dim < 1:
            raise ValueError("input_dim, hidden_layers and hidden_dim must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.head not in HEAD_WIDTHS:
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def hidden_widths(self):
        """Hidden widths; halved per layer (min 1) when decreasing_dim."""
        if self.decreasing_dim:
            return [max(self.hidden_dim // 2**k, 1) for k in range(self.hidden_layers)]
        return [self.hidden_dim] * self.hidden_layers

    @property
    def head_width(self):
        return HEAD_WIDTHS[self.head]

    @property
    def layer_dims(self):
        """(in, out) pairs for every linear layer including the output."""
        dims = [self.input_dim] + self.hidden_widths + [self.head_width]
        return list(zip(dims[:-1], dims[1:]))

    def parameter_shapes(self):
        shapes = {}
        for i, (a, b) in enumerate(self.layer_dims):
            if self.variational:
                shapes[f"layers.{i}.W_mu"] = (a, b)
                shapes[f"layers.{i}.W_rho"] = (a, b)
                shapes[f"layers.{i}.b_mu"] = (b,)
                shapes[f"layers.{i}.b_rho"] = (b,)
            else:
                shapes[f"layers.{i}.W"] = (a, b)
                shapes[f"layers.{i}.b"] = (b,)
        return shapes

    @property
    def n_parameters(self):
        return sum(int(np.prod(s)) for s in self.parameter_shapes().values())

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_layers": self.hidden_layers,
            "hidden_dim": self.hidden_dim,
            "decreasing_dim": self.decreasing_dim,
            "dropout_rate": self.dropout_rate,
            "head": self.head,
            "variational": self.variational,
        }


@dataclass
class NetworkState:
    """Trainable parameters, keyed by layer-qualified names."""

    params: dict

    def copy(self):
        return NetworkState({k: v.copy() for k, v in self.params.items()})

    def check(self, spec):
        shapes = spec.parameter_shapes()
        if set(self.params) != set(shapes):
            raise ValueError("parameter names do not match the spec")
        for name, arr in self.params.items():
            if arr.shape != shapes[name]:
                raise ValueError(f"{name}: shape {arr.shape} != {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")


@dataclass
class TrainConfig:
    """Optimization settings for one fit."""

    learning_rate: float = 1e-3
    scheduler_factor: float = 0.5
    scheduler_patience: int = 50
    weight_decay: float = 5e-4
    max_epochs: int = 500
    batch_size: int = 256
    early_stop_patience: int = 100
    seed: int = 0
    kl_weight: float = None  # None: 1 / (batches per epoch)
    prior_std: float = 1.0
    decoupled_weight_decay: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("scheduler_factor", "max_epochs", "batch_size",
                     "scheduler_patience", "early_stop_patience", "prior_std"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def to_dict(self):
        d = dict(self.__dict__)
        return d


def init_state(spec, rng):
    """Kaiming-uniform weights, zero biases; variational means likewise with
    rho = -5 (posterior std around 6.7e-3)."""
    params = {}
    for i, (a, b) in enumerate(spec.layer_dims):
        bound = math.sqrt(6.0 / a)
        w = (rng.random((a, b)) * 2.0 - 1.0) * bound
        if spec.variational:
            params[f"layers.{i}.W_mu"] = w
            params[f"layers.{i}.W_rho"] = np.full((a, b), -5.0)
            params[f"layers.{i}.b_mu"] = np.zeros(b)
            params[f"layers.{i}.b_rho"] = np.full(b, -5.0)
        else:
            params[f"layers.{i}.W"] = w
            params[f"layers.{i}.b"] = np.zeros(b)
    return NetworkState(params)


def _apply_head(spec, raw, cache):
    if spec.head == "scalar":
        return raw
    if spec.head == "gaussian":
        sp = softplus(raw[:, 1])
        var = np.maximum(sp, VARIANCE_FLOOR)
        cache["head_grad"] = np.where(sp > VARIANCE_FLOOR, logistic(raw[:, 1]), 0.0)
        return np.column_stack([raw[:, 0], var])
    # evidential: nu, beta strictly positive, alpha = softplus + 1 > 1
    sp = softplus(raw[:, 1:])
    pos = np.maximum(sp, _POSITIVE_FLOOR)
    cache["head_grad"] = np.where(sp > _POSITIVE_FLOOR, logistic(raw[:, 1:]), 0.0)
    return np.column_stack([raw[:, 0], pos[:, 0], pos[:, 1] + 1.0, pos[:, 2]])


def forward(spec, state, batch, mode, rng=None):
    """Run the network; returns (outputs, cache) where outputs already carry
    the head transform (variance floored, evidential constraints applied).

    Dropout and variational weight sampling are active in 'train' and
    'mc_dropout' modes and disabled in 'eval'. Deterministic given rng.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"batch must be (B, {spec.input_dim}), got {x.shape}")
    stochastic = mode != "eval"
    if stochastic and rng is None and (spec.dropout_rate > 0 or spec.variational):
        raise ValueError(f"mode {mode!r} requires an rng")

    n_layers = spec.hidden_layers + 1
    cache = {"mode": mode, "layers": []}
    h = x
    for i in range(n_layers):
        lc = {"h_in": h}
        if spec.variational:
            w_mu = state.params[f"layers.{i}.W_mu"]
            b_mu = state.params[f"layers.{i}.b_mu"]
            if stochastic:
                w_rho = state.params[f"layers.{i}.W_rho"]
                b_rho = state.params[f"layers.{i}.b_rho"]
                eps_w = standard_normal(rng, w_mu.shape)
                eps_b = standard_normal(rng, b_mu.shape)
                w = w_mu + softplus(w_rho) * eps_w
                b = b_mu + softplus(b_rho) * eps_b
                lc["eps_W"], lc["eps_b"] = eps_w, eps_b
            else:
                w, b = w_mu, b_mu
        else:
            w = state.params[f"layers.{i}.W"]
            b = state.params[f"layers.{i}.b"]
        lc["W_used"] = w
        z = h @ w + b
        if i < spec.hidden_layers:
            relu_mask = z > 0
            h = np.where(relu_mask, z, 0.0)
            lc["relu_mask"] = relu_mask
            if stochastic and spec.dropout_rate > 0:
                keep = (rng.random(h.shape) >= spec.dropout_rate).astype(np.float64)
                dmask = keep / (1.0 - spec.dropout_rate)
                h = h * dmask
                lc["dropout_mask"] = dmask
        else:
            h = z
        cache["layers"].append(lc)
    out = _apply_head(spec, h, cache)
    return out, cache


def backward(spec, state, cache, output_gradients):
    """Exact reverse-mode gradients of sum(output_gradients * outputs)
    with respect to every parameter, reusing the forward pass's dropout
    masks and weight-noise draws.
    """
    if not isinstance(cache, dict) or "layers" not in cache:
        raise RuntimeError("backward requires the cache of a matching forward pass")
    d_out = np.asarray(output_gradients, dtype=np.float64)
    b_size = cache["layers"][0]["h_in"].shape[0]
    if d_out.shape != (b_size, spec.head_width):
        raise ValueError(
            f"output_gradients must be ({b_size}, {spec.head_width}), got {d_out.shape}"
        )

    if spec.head == "scalar":
        d_raw = d_out
    elif spec.head == "gaussian":
        d_raw = np.column_stack([d_out[:, 0], d_out[:, 1] * cache["head_grad"]])
    else:
        d_raw = np.column_stack([d_out[:, 0], d_out[:, 1:] * cache["head_grad"]])

    grads = {}
    d_after = d_raw
    for i in reversed(range(spec.hidden_layers + 1)):
        lc = cache["layers"][i]
        d_z = d_after
        if i < spec.hidden_layers:
            if "dropout_mask" in lc:
                d_z = d_z * lc["dropout_mask"]
            d_z = np.where(lc["relu_mask"], d_z, 0.0)
        d_w = lc["h_in"].T @ d_z
        d_b = d_z.sum(axis=0)
        d_after = d_z @ lc["W_used"].T
        if spec.variational:
            grads[f"layers.{i}.W_mu"] = d_w
            grads[f"layers.{i}.b_mu"] = d_b
            if "eps_W" in lc:
                w_rho = state.params[f"layers.{i}.W_rho"]
                b_rho = state.params[f"layers.{i}.b_rho"]
                grads[f"layers.{i}.W_rho"] = d_w * lc["eps_W"] * logistic(w_rho)
                grads[f"layers.{i}.b_rho"] = d_b * lc["eps_b"] * logistic(b_rho)
            else:
                grads[f"layers.{i}.W_rho"] = np.zeros_like(d_w)
                grads[f"layers.{i}.b_rho"] = np.zeros_like(d_b)
        else:
            grads[f"layers.{i}.W"] = d_w
            grads[f"layers.{i}.b"] = d_b
    return grads


def network_kl(spec, state, prior_std):
    """KL of the variational weight posterior against the zero-mean prior,
    with gradients w.r.t. every (mu, rho) tensor."""
    if not spec.variational:
        raise ValueError("network_kl applies to variational networks only")
    total = 0.0
    grads = {}
    for i in range(spec.hidden_layers + 1):
        for kind in ("W", "b"):
            mu = state.params[f"layers.{i}.{kind}_mu"]
            rho = state.params[f"layers.{i}.{kind}_rho"]
            stds = np.asarray(softplus(rho))
            value, d_mu, d_std = kl_diag_gaussians(mu.ravel(), stds.ravel(), prior_std)
            total += value
            grads[f"layers.{i}.{kind}_mu"] = d_mu.reshape(mu.shape)
            grads[f"layers.{i}.{kind}_rho"] = d_std.reshape(rho.shape) * logistic(rho)
    return total, grads


# ---------------------------------------------------------------------------
# losses as head adapters: (outputs, targets) -> (value, d_outputs)
# ---------------------------------------------------------------------------


def _mse_adapter(outputs, targets):
    value, g = censored_mse(outputs[:, 0], targets)
    d = np.zeros_like(outputs)
    d[:, 0] = g
    return value, d


def _nll_adapter(outputs, targets):
    params = GaussianParams(mean=outputs[:, 0], variance=outputs[:, 1])
    value, d_mean, d_var = censored_nll(params, targets, include_constant=False)
    return value, np.column_stack([d_mean, d_var])


def _evidential_adapter(outputs, targets):
    if targets.n_censored:
        raise ValueError("the evidential loss accepts observed labels only")
    out = EvidentialOutput(
        gamma=outputs[:, 0], nu=outputs[:, 1], alpha=outputs[:, 2], beta=outputs[:, 3]
    )
    value, d_g, d_n, d_a, d_b = evidential_loss(out, targets.labels, lam=1.0)
    return value, np.column_stack([d_g, d_n, d_a, d_b])


LOSSES = {
    "censored_mse": _mse_adapter,
    "censored_nll": _nll_adapter,
    "evidential": _evidential_adapter,
}


def resolve_loss(loss):
    if callable(loss):
        return loss
    try:
        return LOSSES[loss]
    except KeyError:
        raise ValueError(f"unknown loss {loss!r}") from None


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(state):
    return AdamState(
        m={k: np.zeros_like(p) for k, p in state.params.items()},
        v={k: np.zeros_like(p) for k, p in state.params.items()},
    )


def adam_step(state, gradients, opt, lr, weight_decay=0.0, decoupled=False,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update (bias-corrected moments), mutating state in place.

    Weight decay is added to the gradient in the classic coupled form by
    default; ``decoupled`` subtracts lr * wd * theta outside the moments.
    """
    opt.t += 1
    bc1 = 1.0 - beta1**opt.t
    bc2 = 1.0 - beta2**opt.t
    for name, g in gradients.items():
        p = state.params[name]
        if weight_decay and not decoupled:
            g = g + weight_decay * p
        m = opt.m[name] = beta1 * opt.m[name] + (1.0 - beta1) * g
        v = opt.v[name] = beta2 * opt.v[name] + (1.0 - beta2) * (g * g)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay and decoupled:
            step = step + lr * weight_decay * p
        state.params[name] = p - step
    return state


@dataclass
class TrainingLog:
    """Per-epoch record of one fit."""

    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1

    def to_dict(self):
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "lr": self.lr,
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
        }


def _validation_loss(spec, state, loss_fn, features, targets):
    outputs, _ = forward(spec, state, features, "eval")
    if not np.all(np.isfinite(outputs)):
        return math.nan
    value, _ = loss_fn(outputs, targets)
    return value


def fit(spec, config, loss, train, validation):
    """Train a network on a CensoredDataset with plateau lr reduction and
    early stopping; returns the best-validation state and the training log.

    For variational networks the objective adds kl_weight * KL(q || prior)
    to each minibatch loss (one weight sample per step); kl_weight defaults
    to 1 / batches-per-epoch. The validation loss is always the data term
    at deterministic weights.
    """
    if len(train) == 0:
        raise TrainingError("training set is empty")
    if len(validation) == 0:
        raise TrainingError("validation set is empty")
    loss_fn = resolve_loss(loss)

    x_train, t_train = train.features, train.targets
    x_val, t_val = validation.features, validation.targets
    n = len(train)
    n_batches = max(1, math.ceil(n / config.batch_size))
    kl_weight = config.kl_weight if config.kl_weight is not None else 1.0 / n_batches

    state = init_state(spec, derive_rng(config.seed, 0))
    opt = adam_init(state)
    lr = config.learning_rate
    log = TrainingLog()
    best_val = math.inf
    best_params = None
    since_improve = 0

    for epoch in range(config.max_epochs):
        perm = derive_rng(config.seed, 1, epoch).permutation(n)
        epoch_loss = 0.0
        for bi in range(n_batches):
            idx = perm[bi * config.batch_size : (bi + 1) * config.batch_size]
            if idx.size == 0:
                continue
            rng = derive_rng(config.seed, 2, epoch * n_batches + bi)
            outputs, cache = forward(spec, state, x_train[idx], "train", rng)
            if not np.all(np.isfinite(outputs)):
                raise NumericError(
                    f"non-finite network outputs at epoch {epoch}, batch {bi}"
                )
            batch_targets = BatchTargets(t_train.labels[idx], t_train.masks[idx])
            value, d_out = loss_fn(outputs, batch_targets)
            grads = backward(spec, state, cache, d_out)
            if spec.variational:
                kl_value, kl_grads = network_kl(spec, state, config.prior_std)
                value = bbb_objective(value, kl_value, kl_weight)
                for name, g in kl_grads.items():
                    grads[name] = grads[name] + kl_weight * g
            if not math.isfinite(value):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}, batch {bi}"
                )
            adam_step(state, grads, opt, lr, config.weight_decay,
                      config.decoupled_weight_decay)
            epoch_loss += value

        val_value = _validation_loss(spec, state, loss_fn, x_val, t_val)
        if not math.isfinite(val_value):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        log.train_loss.append(epoch_loss / n_batches)
        log.val_loss.append(val_value)
        log.lr.append(lr)

        if val_value < best_val:
            best_val = val_value
            best_params = state.copy().params
            log.best_epoch = epoch
            since_improve = 0
        else:
            since_improve += 1
            if since_improve % config.scheduler_patience == 0:
                lr *= config.scheduler_factor
            if since_improve >= config.early_stop_patience:
                break
    log.stopped_epoch = len(log.train_loss) - 1

    state = NetworkState(best_params)
    return state, log


def default_grid(input_dim, head="scalar", variational=False, max_epochs=100,
                 batch_size=256, seed=0):
    """The full hyperparameter product used for model selection: learning
    rate x scheduler factor x depth x width x decreasing x dropout."""
    for lr, factor, layers, width, decreasing, dropout in itertools.product(
        (5e-5, 1e-4, 5e-4, 1e-3),
        (0.1, 0.5),
        (2, 3, 4),
        (64, 128, 256, 512),
        (False, True),
        (0.25, 0.5, 0.75),
    ):
        spec = NetworkSpec(
            input_dim=input_dim,
            hidden_layers=layers,
            hidden_dim=width,
            decreasing_dim=decreasing,
            dropout_rate=dropout,
            head=head,
            variational=variational,
        )
        config = TrainConfig(
            learning_rate=lr,
            scheduler_factor=factor,
            max_epochs=max_epochs,
            batch_size=batch_size,
            seed=seed,
        )
        yield spec, config


def grid_search(grid, loss, train, validation):
    """Exhaustively fit every (spec, config) candidate and return the pair
    with the lowest validation loss; ties go to fewer parameters, then to
    the lower learning rate.
    """
    best = None
    failures = []
    n_seen = 0
    for spec, config in grid:
        n_seen += 1
        try:
            _, log = fit(spec, config, loss, train, validation)
        except (NumericError, TrainingError) as exc:
            failures.append(f"{spec} / lr={config.learning_rate}: {exc}")
            continue
        key = (min(log.val_loss), spec.n_parameters, config.learning_rate)
        if best is None or key < best[0]:
            best = (key, spec, config)
    if n_seen == 0:
        raise ValueError("empty grid")
    if best is None:
        raise SearchError(
            "every grid candidate failed:\n" + "\n".join(failures)
        )
    return best[1], best[2]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_dict(spec, state, config, loss_id):
    return {
        "format": "censura-checkpoint",
        "version": 1,
        "spec": spec.to_dict(),
        "config": config.to_dict(),
        "loss": loss_id,
        "params": {k: serialize.encode_array(v) for k, v in state.params.items()},
    }


def checkpoint_from_dict(doc):
    if doc.get("format") != "censura-checkpoint":
        raise ValueError("not a checkpoint document")
    spec = NetworkSpec(**doc["spec"])
    config = TrainConfig(**doc["config"])
    state = NetworkState(
        {k: serialize.decode_array(v) for k, v in doc["params"].items()}
    )
    state.check(spec)
    return spec, state, config, doc["loss"]


def save_checkpoint(path, spec, state, config, loss_id):
    serialize.dump_json(checkpoint_dict(spec, state, config, loss_id), path)


def load_checkpoint(path):
    return checkpoint_from_dict(serialize.load_json(path))
