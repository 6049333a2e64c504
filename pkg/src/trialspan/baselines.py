"""Reference regressors over flattened trial features.

All baselines consume the same representation: phase one-hot, drug and
disease vectors, and the masked means of the raw sentence vectors per
criteria segment (no transformer). Four models: the constant MEAN
predictor, ridge regression solved by normal equations, gradient-boosted
regression trees with exact greedy splits, and a flat MLP that reuses the
attention model's regression head and optimizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .embedding import S_MAX, EmbeddedTrial
from .encoder import HeadParams, head_backward, head_forward, init_head, softplus
from .errors import DataFormatError, EmptyDatasetError, SingularSystemError
from .training import AdamState, TrainConfig, adam_step, mse_loss


def flat_features(trials: list[EmbeddedTrial]):
    """Stack trials into (X, y, phases); y entries are NaN when unlabeled."""
    if not trials:
        raise EmptyDatasetError("no trials to featurize")
    rows = []
    for t in trials:
        incl = _segment_mean(t.sentence_mat[:S_MAX], t.sentence_mask[:S_MAX])
        excl = _segment_mean(t.sentence_mat[S_MAX:], t.sentence_mask[S_MAX:])
        rows.append(np.concatenate([t.phase_onehot, t.drug_vec, t.disease_vec, incl, excl]))
    X = np.stack(rows).astype(np.float64)
    y = np.asarray([np.nan if t.label is None else t.label for t in trials], dtype=np.float64)
    phases = np.asarray([t.phase for t in trials], dtype=int)
    return X, y, phases


def _segment_mean(rows, mask):
    count = int(mask.sum())
    if count == 0:
        return np.zeros(rows.shape[1], dtype=np.float64)
    return rows[mask].mean(axis=0)


# --- MEAN -------------------------------------------------------------------


@dataclass
class MeanPredictor:
    """Predicts the training-set average duration for every trial."""

    value: float
    kind: str = field(default="mean", init=False)

    def predict(self, X) -> np.ndarray:
        return np.full(np.asarray(X).shape[0], self.value, dtype=np.float64)


def mean_fit(train_y) -> MeanPredictor:
    train_y = np.asarray(train_y, dtype=np.float64)
    if train_y.size == 0:
        raise EmptyDatasetError("cannot fit the mean of an empty label set")
    return MeanPredictor(value=float(train_y.mean()))


# --- ridge regression ---------------------------------------------------------


@dataclass
class RidgeModel:
    w: np.ndarray
    b: float
    lam: float
    kind: str = field(default="ridge", init=False)

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w + self.b


def ridge_fit(X, y, lam: float = 1.0) -> RidgeModel:
    """Least squares with an L2 penalty on the weights, bias unpenalized.

    Solved by the centered normal equations; the solution then satisfies
    (X'X + lam I) w = X'(y - b) exactly. A singular system at lam = 0
    raises so the caller can retry with a positive penalty.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != y.shape[0] or X.shape[0] < 1:
        raise ValueError(f"need matching non-empty rows, got {X.shape} vs {y.shape}")
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    gram = Xc.T @ Xc + lam * np.eye(X.shape[1])
    try:
        w = np.linalg.solve(gram, Xc.T @ yc)
    except np.linalg.LinAlgError as err:
        raise SingularSystemError(
            f"normal equations are singular at lam={lam}; retry with lam > 0"
        ) from err
    return RidgeModel(w=w, b=float(y_mean - x_mean @ w), lam=lam)


# --- gradient-boosted trees ---------------------------------------------------


@dataclass
class GBDTConfig:
    n_trees: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 5

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees, max_depth, min_samples_leaf must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")


@dataclass
class GBDTModel:
    base: float
    trees: list[dict]  # nested {feature, threshold, left, right} / {value} nodes
    config: GBDTConfig
    kind: str = field(default="gbdt", init=False)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.full(X.shape[0], self.base, dtype=np.float64)
        for tree in self.trees:
            out += self.config.learning_rate * _tree_predict(tree, X)
        return out


def gbdt_fit(X, y, config: Optional[GBDTConfig] = None) -> GBDTModel:
    """Boosted regression stumps-to-trees on residuals.

    The initial prediction is mean(y); each tree greedily minimizes the
    summed squared error with exact splits at midpoints between sorted
    unique feature values (ties resolved to the lowest feature index, then
    the lowest threshold). Fitting stops early once residuals hit zero, so
    a constant target yields an ensemble with no trees.
    """
    config = config or GBDTConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y row counts differ")
    if X.shape[0] < 2 * config.min_samples_leaf:
        raise ValueError(
            f"need at least {2 * config.min_samples_leaf} samples, got {X.shape[0]}")
    base = float(y.mean())
    residual = y - base
    trees: list[dict] = []
    for _ in range(config.n_trees):
        if float(residual @ residual) <= 1e-12 * max(1.0, float(y @ y)):
            break
        tree = _fit_tree(X, residual, np.arange(X.shape[0]), 1, config)
        trees.append(tree)
        residual = residual - config.learning_rate * _tree_predict(tree, X)
    return GBDTModel(base=base, trees=trees, config=config)


def _fit_tree(X, residual, idx, depth, config) -> dict:
    node_value = float(residual[idx].mean())
    if depth > config.max_depth or idx.size < 2 * config.min_samples_leaf:
        return {"value": node_value}
    split = _best_split(X, residual, idx, config.min_samples_leaf)
    if split is None:
        return {"value": node_value}
    feature, threshold = split
    left = idx[X[idx, feature] <= threshold]
    right = idx[X[idx, feature] > threshold]
    return {
        "feature": int(feature),
        "threshold": float(threshold),
        "left": _fit_tree(X, residual, left, depth + 1, config),
        "right": _fit_tree(X, residual, right, depth + 1, config),
    }


def _best_split(X, residual, idx, min_leaf):
    r = residual[idx]
    n = idx.size
    parent_sse = float(r @ r - (r.sum() ** 2) / n)
    best = None  # (sse, feature, threshold)
    for j in range(X.shape[1]):
        xs = X[idx, j]
        order = np.argsort(xs, kind="stable")
        xs_sorted = xs[order]
        r_sorted = r[order]
        c1 = np.cumsum(r_sorted)
        c2 = np.cumsum(r_sorted * r_sorted)
        left_n = np.arange(1, n)
        ok = (xs_sorted[1:] > xs_sorted[:-1]) & (left_n >= min_leaf) & (n - left_n >= min_leaf)
        if not ok.any():
            continue
        nl = left_n[ok]
        s1l, s2l = c1[nl - 1], c2[nl - 1]
        s1r, s2r = c1[-1] - s1l, c2[-1] - s2l
        sse = (s2l - s1l * s1l / nl) + (s2r - s1r * s1r / (n - nl))
        k = int(np.argmin(sse))  # first minimum = lowest threshold
        if best is None or sse[k] < best[0]:
            threshold = 0.5 * (xs_sorted[nl[k] - 1] + xs_sorted[nl[k]])
            best = (float(sse[k]), j, float(threshold))
    if best is None or best[0] >= parent_sse - 1e-12:
        return None
    return best[1], best[2]


def _tree_predict(node, X) -> np.ndarray:
    out = np.empty(X.shape[0], dtype=np.float64)
    _tree_fill(node, X, np.arange(X.shape[0]), out)
    return out


def _tree_fill(node, X, idx, out):
    if "value" in node:
        out[idx] = node["value"]
        return
    go_left = X[idx, node["feature"]] <= node["threshold"]
    _tree_fill(node["left"], X, idx[go_left], out)
    _tree_fill(node["right"], X, idx[~go_left], out)


# --- flat MLP ----------------------------------------------------------------


@dataclass
class FlatMLPModel:
    head: HeadParams
    feature_dim: int
    hidden1: int
    hidden2: int
    dropout: float
    seed: int
    kind: str = field(default="flat_mlp", init=False)

    def predict(self, X) -> np.ndarray:
        z, _ = head_forward(self.head, np.asarray(X, dtype=np.float64))
        return softplus(z)


def flat_mlp_fit(X, y, hidden1: Optional[int] = None, hidden2: Optional[int] = None,
                 dropout: float = 0.1, seed: int = 0,
                 train_config: Optional[TrainConfig] = None) -> FlatMLPModel:
    """The attention model's MLP head trained directly on flat features."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cfg = train_config or TrainConfig()
    n, feature_dim = X.shape
    hidden1 = hidden1 or 2 * feature_dim
    hidden2 = hidden2 or feature_dim
    head = init_head(np.random.default_rng(seed), feature_dim, hidden1, hidden2)
    state = AdamState.init(head)
    shuffle_rng = np.random.default_rng(cfg.shuffle_seed)
    dropout_rng = np.random.default_rng([cfg.shuffle_seed, 0xF1A7])
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            z, cache = head_forward(head, X[sel], dropout, train_mode=True, rng=dropout_rng)
            yhat = softplus(z)
            dz = (2.0 * (yhat - y[sel]) / sel.size) * expit(z)
            _, grads = head_backward(head, cache, dz)
            adam_step(state, head, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return FlatMLPModel(head=head, feature_dim=feature_dim, hidden1=hidden1,
                        hidden2=hidden2, dropout=dropout, seed=seed)


# --- artifacts ---------------------------------------------------------------


def save_baseline(model, path: str | Path) -> None:
    """Serialize any baseline to its JSON artifact."""
    if model.kind == "mean":
        doc = {"kind": "mean", "value": model.value}
    elif model.kind == "ridge":
        doc = {"kind": "ridge", "w": model.w.tolist(), "b": model.b, "lam": model.lam}
    elif model.kind == "gbdt":
        doc = {"kind": "gbdt", "base": model.base, "trees": model.trees,
               "config": {"n_trees": model.config.n_trees,
                          "max_depth": model.config.max_depth,
                          "learning_rate": model.config.learning_rate,
                          "min_samples_leaf": model.config.min_samples_leaf}}
    elif model.kind == "flat_mlp":
        doc = {"kind": "flat_mlp", "feature_dim": model.feature_dim,
               "hidden1": model.hidden1, "hidden2": model.hidden2,
               "dropout": model.dropout, "seed": model.seed,
               "weights": {name: arr.tolist() for name, arr in model.head.items()}}
    else:
        raise DataFormatError(f"unknown baseline kind {model.kind!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_baseline(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    kind = doc.get("kind")
    if kind == "mean":
        return MeanPredictor(value=float(doc["value"]))
    if kind == "ridge":
        return RidgeModel(w=np.asarray(doc["w"], dtype=np.float64),
                          b=float(doc["b"]), lam=float(doc["lam"]))
    if kind == "gbdt":
        return GBDTModel(base=float(doc["base"]), trees=doc["trees"],
                         config=GBDTConfig(**doc["config"]))
    if kind == "flat_mlp":
        weights = doc["weights"]
        head = HeadParams(**{name.split(".", 1)[1]: np.asarray(weights[name], dtype=np.float64)
                             for name in weights})
        return FlatMLPModel(head=head, feature_dim=int(doc["feature_dim"]),
                            hidden1=int(doc["hidden1"]), hidden2=int(doc["hidden2"]),
                            dropout=float(doc["dropout"]), seed=int(doc["seed"]))
    raise DataFormatError(f"{path}: unknown baseline kind {kind!r}")
