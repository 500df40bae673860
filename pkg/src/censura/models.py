"""The seven uncertainty-quantifying predictors behind one interface.

Epistemic-only models (random forest, ensemble, MC-dropout, Bayes by
Backprop) estimate uncertainty as the spread over sampled predictions;
Gaussian heads predict an aleatoric variance directly; the Gaussian
ensemble and the evidential model provide both parts. All censoring-aware
models train with the one-sided or Tobit losses; the random forest and
evidential model are observed-only baselines.
"""

import hashlib
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.tree import DecisionTreeRegressor

from . import serialize
from .dataset import observed_subset
from .errors import TrainingError
from .losses import EvidentialOutput, evidential_uncertainties
from .network import (
    NetworkSpec,
    TrainConfig,
    checkpoint_dict,
    checkpoint_from_dict,
    fit,
    forward,
)
from .numerics import VARIANCE_FLOOR, GaussianParams
from .rng import derive_rng

KINDS = (
    "random_forest",
    "ensemble",
    "mc_dropout",
    "bayes_by_backprop",
    "gaussian",
    "gaussian_ensemble",
    "evidential",
)

#: baselines that never see censored labels, whatever the caller asks
OBSERVED_ONLY_KINDS = ("random_forest", "evidential")

_DEFAULT_MEMBERS = {"ensemble": 50, "gaussian_ensemble": 5}
_LOSS_BY_KIND = {
    "ensemble": "censored_mse",
    "mc_dropout": "censored_mse",
    "bayes_by_backprop": "censored_mse",  # data term of the variational objective
    "gaussian": "censored_nll",
    "gaussian_ensemble": "censored_nll",
    "evidential": "evidential",
}


@dataclass
class UncertainPrediction:
    """Vectorized predictions: a mean per point plus optional variances.

    The aleatoric channel is floored at 1e-6; the epistemic channel may be
    exactly zero (a collapsed ensemble).
    """

    mean: np.ndarray
    aleatoric_variance: np.ndarray = None
    epistemic_variance: np.ndarray = None

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("prediction means must be finite")
        if self.aleatoric_variance is not None:
            v = np.atleast_1d(np.asarray(self.aleatoric_variance, dtype=np.float64))
            if not np.all(np.isfinite(v)):
                raise ValueError("aleatoric variances must be finite")
            self.aleatoric_variance = np.maximum(v, VARIANCE_FLOOR)
        if self.epistemic_variance is not None:
            v = np.atleast_1d(np.asarray(self.epistemic_variance, dtype=np.float64))
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise ValueError("epistemic variances must be finite and >= 0")
            self.epistemic_variance = v

    def __len__(self):
        return self.mean.shape[0]

    def variance(self, source):
        """Select the named variance channel ('aleatoric' or 'epistemic')."""
        if source == "aleatoric":
            v = self.aleatoric_variance
        elif source == "epistemic":
            v = self.epistemic_variance
        else:
            raise ValueError(f"unknown variance source {source!r}")
        if v is None:
            raise ValueError(f"prediction carries no {source} variance")
        return v


def ensemble_aggregate(member_predictions):
    """Ensemble mean and population variance (divisor K) over members.

    ``member_predictions`` has one row per member; aggregation is
    elementwise over the remaining axes.
    """
    preds = np.asarray(member_predictions, dtype=np.float64)
    k = preds.shape[0]
    if k < 2:
        raise ValueError("ensemble aggregation needs at least 2 members")
    mean = preds.mean(axis=0)
    variance = np.mean((preds - mean) ** 2, axis=0)
    return mean, variance


def gaussian_ensemble_aggregate(members):
    """Combine K Gaussian members: mean of means, aleatoric as the average
    predicted variance, epistemic as the population variance of the means.
    """
    if len(members) < 2:
        raise ValueError("gaussian ensemble aggregation needs at least 2 members")
    means = np.stack([np.atleast_1d(m.mean) for m in members])
    variances = np.stack([np.atleast_1d(m.variance) for m in members])
    mean, epistemic = ensemble_aggregate(means)
    return UncertainPrediction(
        mean=mean,
        aleatoric_variance=variances.mean(axis=0),
        epistemic_variance=epistemic,
    )


# ---------------------------------------------------------------------------
# random forest (observed-only baseline)
# ---------------------------------------------------------------------------


@dataclass
class ForestParams:
    """CART forest settings; fractional min_samples values are fractions of
    the training size. All features are considered at every split."""

    n_estimators: int = 100
    min_samples_leaf: float = 2
    min_samples_split: float = 2
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")


def _resolve_min_samples(value, n, minimum):
    if 0 < value < 1:
        resolved = math.ceil(value * n)
    else:
        resolved = int(value)
    if resolved < minimum:
        warnings.warn(
            f"min_samples value {value!r} below {minimum}; normalized to {minimum}"
        )
        resolved = minimum
    return resolved


@dataclass
class Forest:
    params: ForestParams
    trees: list  # per tree: dict of flat node arrays

    def member_predictions(self, features):
        x = np.asarray(features, dtype=np.float64)
        return np.stack([_tree_predict(t, x) for t in self.trees])


def _tree_arrays(sk_tree):
    t = sk_tree.tree_
    return {
        "children_left": t.children_left.astype(np.int64),
        "children_right": t.children_right.astype(np.int64),
        "feature": t.feature.astype(np.int64),
        "threshold": t.threshold.astype(np.float64),
        "value": t.value.reshape(-1).astype(np.float64),
    }


def _tree_predict(tree, x):
    left, right = tree["children_left"], tree["children_right"]
    node = np.zeros(x.shape[0], dtype=np.int64)
    active = left[node] != -1
    while np.any(active):
        cur = node[active]
        go_left = x[active, tree["feature"][cur]] <= tree["threshold"][cur]
        node[active] = np.where(go_left, left[cur], right[cur])
        active = left[node] != -1
    return tree["value"][node]


def forest_fit(params, features, labels, seed=0):
    """Fit a variance-reduction CART forest on observed data, one bootstrap
    sample (same size, with replacement) per tree."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise TrainingError("forest training set is empty")
    leaf = _resolve_min_samples(params.min_samples_leaf, n, 1)
    split = _resolve_min_samples(params.min_samples_split, n, 2)
    trees = []
    for k in range(params.n_estimators):
        rng = derive_rng(seed, 7, k)
        if params.bootstrap:
            idx = rng.integers(0, n, size=n)
            xk, yk = x[idx], y[idx]
        else:
            xk, yk = x, y
        tree = DecisionTreeRegressor(
            criterion="squared_error",
            min_samples_leaf=leaf,
            min_samples_split=split,
            max_features=None,
            random_state=k,
        )
        tree.fit(xk, yk)
        trees.append(_tree_arrays(tree))
    return Forest(params=params, trees=trees)


# ---------------------------------------------------------------------------
# unified train / predict
# ---------------------------------------------------------------------------


@dataclass
class ModelKind:
    """A predictor family plus its settings.

    ``network``/``train_config`` configure the neural kinds (the head and
    variational flag are set automatically from the kind); ``forest``
    configures the random forest. ``members`` defaults to 50 for the
    ensemble and 5 for the gaussian ensemble; ``inference_samples`` is the
    number of stochastic passes for MC-dropout and Bayes by Backprop.
    """

    name: str
    network: NetworkSpec = None
    train_config: TrainConfig = None
    forest: ForestParams = None
    members: int = None
    inference_samples: int = 500

    def __post_init__(self):
        if self.name not in KINDS:
            raise ValueError(f"unknown model kind {self.name!r}")
        if self.members is None:
            self.members = _DEFAULT_MEMBERS.get(self.name, 1)
        if self.name == "random_forest":
            if self.forest is None:
                self.forest = ForestParams()
        elif self.network is None or self.train_config is None:
            raise ValueError(f"kind {self.name!r} needs network and train_config")

    def resolved_network(self):
        head = {"gaussian": "gaussian", "gaussian_ensemble": "gaussian",
                "evidential": "evidential"}.get(self.name, "scalar")
        return replace(
            self.network,
            head=head,
            variational=self.name == "bayes_by_backprop",
        )


@dataclass
class TrainedModel:
    """Immutable training artifact: member networks or trees plus metadata."""

    kind: ModelKind
    loss: str = None
    members: list = field(default_factory=list)  # (spec, state, config) triples
    forest: Forest = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        doc = {
            "format": "censura-model",
            "version": 1,
            "kind": {
                "name": self.kind.name,
                "members": self.kind.members,
                "inference_samples": self.kind.inference_samples,
            },
            "loss": self.loss,
            "metadata": self.metadata,
            "members": [
                checkpoint_dict(spec, state, config, self.loss)
                for spec, state, config in self.members
            ],
        }
        if self.forest is not None:
            doc["forest"] = {
                "params": dict(self.forest.params.__dict__),
                "trees": [
                    {k: serialize.encode_array(v) for k, v in t.items()}
                    for t in self.forest.trees
                ],
            }
        return doc

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != "censura-model":
            raise ValueError("not a model artifact")
        members = []
        for m in doc["members"]:
            spec, state, config, _ = checkpoint_from_dict(m)
            members.append((spec, state, config))
        forest = None
        if "forest" in doc:
            forest = Forest(
                params=ForestParams(**doc["forest"]["params"]),
                trees=[
                    {k: serialize.decode_array(v) for k, v in t.items()}
                    for t in doc["forest"]["trees"]
                ],
            )
        kd = doc["kind"]
        if kd["name"] == "random_forest":
            kind = ModelKind(name=kd["name"], members=kd["members"],
                             inference_samples=kd["inference_samples"],
                             forest=forest.params if forest else None)
        else:
            spec, _, config = members[0]
            base = replace(spec, head="scalar", variational=False)
            kind = ModelKind(name=kd["name"], network=base, train_config=config,
                             members=kd["members"],
                             inference_samples=kd["inference_samples"])
        return cls(kind=kind, loss=doc["loss"], members=members, forest=forest,
                   metadata=doc["metadata"])

    def save(self, path):
        serialize.dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path):
        return cls.from_dict(serialize.load_json(path))


def _dataset_hash(ds):
    h = hashlib.blake2b(digest_size=16)
    for arr in (ds.features, ds.labels, ds.masks):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _member_seed(seed, k):
    return seed * 1_000_003 + k


def _worker_count():
    try:
        return max(1, int(os.environ.get("CENSURA_THREADS", "1")))
    except ValueError:
        return 1


def train(kind, train_ds, validation_ds, use_censored=True, seed=0):
    """Fit one predictor.

    With ``use_censored`` off, both the training and validation sets are
    reduced to their observed rows before fitting. The random forest and
    evidential baselines always train observed-only; asking for censored
    labels there only raises a warning.
    """
    if kind.name in OBSERVED_ONLY_KINDS:
        if use_censored:
            warnings.warn(
                f"{kind.name} never trains on censored labels; "
                "use_censored is ignored"
            )
        effective_censored = False
    else:
        effective_censored = use_censored

    if not effective_censored:
        train_ds = observed_subset(train_ds)
        validation_ds = observed_subset(validation_ds)
        if len(train_ds) == 0:
            raise TrainingError("observed training subset is empty")
        if len(validation_ds) == 0 and kind.name != "random_forest":
            raise TrainingError("observed validation subset is empty")

    metadata = {
        "kind": kind.name,
        "seed": seed,
        "use_censored": bool(effective_censored),
        "dataset_hash": _dataset_hash(train_ds),
        "n_train": len(train_ds),
        "n_validation": len(validation_ds),
    }

    if kind.name == "random_forest":
        forest = forest_fit(
            kind.forest, train_ds.features, train_ds.labels, seed=seed
        )
        return TrainedModel(kind=kind, loss="mse", forest=forest, metadata=metadata)

    loss = _LOSS_BY_KIND[kind.name]
    spec = kind.resolved_network()

    def fit_member(k):
        config = replace(kind.train_config, seed=_member_seed(seed, k))
        state, log = fit(spec, config, loss, train_ds, validation_ds)
        return (spec, state, config), log

    workers = min(_worker_count(), kind.members)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fit_member, range(kind.members)))
    else:
        results = [fit_member(k) for k in range(kind.members)]

    members = [r[0] for r in results]
    model = TrainedModel(kind=kind, loss=loss, members=members, metadata=metadata)
    model.metadata["training_logs"] = [r[1].to_dict() for r in results]
    return model


def _eval_outputs(spec, state, features):
    out, _ = forward(spec, state, features, "eval")
    return out


def predict(model, features, seed=None):
    """Per-point predictions with the uncertainty channels the model kind
    supports. Deterministic given the artifact and the sampling seed
    (defaults to the training seed)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-d matrix")
    if seed is None:
        seed = model.metadata.get("seed", 0)
    name = model.kind.name

    if name == "random_forest":
        preds = model.forest.member_predictions(x)
        mean, variance = ensemble_aggregate(preds)
        return UncertainPrediction(mean=mean, epistemic_variance=variance)

    if model.members and x.shape[1] != model.members[0][0].input_dim:
        raise ValueError(
            f"feature width {x.shape[1]} does not match the trained "
            f"input dim {model.members[0][0].input_dim}"
        )

    if name in ("ensemble",):
        preds = np.stack(
            [_eval_outputs(spec, state, x)[:, 0] for spec, state, _ in model.members]
        )
        mean, variance = ensemble_aggregate(preds)
        return UncertainPrediction(mean=mean, epistemic_variance=variance)

    if name in ("mc_dropout", "bayes_by_backprop"):
        spec, state, _ = model.members[0]
        if not spec.variational and spec.dropout_rate == 0:
            # no stochasticity: every sample is the eval pass, spread exactly 0
            out = _eval_outputs(spec, state, x)
            return UncertainPrediction(
                mean=out[:, 0], epistemic_variance=np.zeros(x.shape[0])
            )
        samples = np.empty((model.kind.inference_samples, x.shape[0]))
        for s in range(model.kind.inference_samples):
            rng = derive_rng(seed, 11, s)
            out, _ = forward(spec, state, x, "mc_dropout", rng)
            samples[s] = out[:, 0]
        mean = samples.mean(axis=0)
        variance = np.mean((samples - mean) ** 2, axis=0)
        return UncertainPrediction(mean=mean, epistemic_variance=variance)

    if name == "gaussian":
        spec, state, _ = model.members[0]
        out = _eval_outputs(spec, state, x)
        return UncertainPrediction(mean=out[:, 0], aleatoric_variance=out[:, 1])

    if name == "gaussian_ensemble":
        members = []
        for spec, state, _ in model.members:
            out = _eval_outputs(spec, state, x)
            members.append(GaussianParams(mean=out[:, 0], variance=out[:, 1]))
        return gaussian_ensemble_aggregate(members)

    if name == "evidential":
        spec, state, _ = model.members[0]
        out = _eval_outputs(spec, state, x)
        nig = EvidentialOutput(
            gamma=out[:, 0], nu=out[:, 1], alpha=out[:, 2], beta=out[:, 3]
        )
        epistemic, aleatoric = evidential_uncertainties(nig)
        return UncertainPrediction(
            mean=nig.gamma, aleatoric_variance=aleatoric, epistemic_variance=epistemic
        )

    raise ValueError(f"unknown model kind {name!r}")
