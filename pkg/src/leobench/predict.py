"""Feature assembly and reference predictors for latency/throughput.

The feature vector couples terminal telemetry with constellation geometry:
site coordinates, the top-K visible satellites (azimuth/elevation/range,
padded with a sentinel when fewer are overhead), terminal orientation, the
last five seconds of the target metric, and second-of-day.

Reference models, deliberately simple and fully deterministic:

  * persistence: tomorrow looks like one second ago;
  * harmonic mean of the 5-lag history;
  * ridge autoregression over the lags, solved in closed form on
    standardized data (which also makes it exactly scale-equivariant);
  * a small gradient-boosted regression-tree ensemble over all features
    (squared loss, depth <= 3, <= 200 trees, shrinkage 0.1).

Models serialize to versioned JSON with coefficients/trees spelled out, so
files survive refactors and can be inspected by hand.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .orbital import GroundSite, visible_sats
from .telemetry import InsufficientHistory, TelemetryWindow
from .triggers import OrbitalContext

log = logging.getLogger(__name__)

DEFAULT_TOP_K = 8
PAD_SENTINEL = -1.0
HISTORY_LAGS = 5
MODEL_FORMAT_VERSION = 1
RIDGE_LAMBDA = 1e-6


class ZeroActual(ValueError):
    """MAPE undefined: a test-set actual is not strictly positive."""


class DegenerateDesign(ValueError):
    """No usable (non-constant) feature columns."""


# --- features ------------------------------------------------------------

def feature_names(k: int = DEFAULT_TOP_K) -> tuple[str, ...]:
    names = ["site_lat", "site_lon", "site_alt_m"]
    for i in range(1, k + 1):
        names += [f"sat{i}_az", f"sat{i}_el", f"sat{i}_range_km"]
    names += ["term_az", "term_el"]
    names += [f"h{i}" for i in range(1, HISTORY_LAGS + 1)]
    names += ["second_of_day"]
    return tuple(names)


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]
    sat_slot_valid: tuple[bool, ...]
    names: tuple[str, ...]

    @property
    def dim(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


def assemble_features(window: TelemetryWindow,
                      orbital: OrbitalContext,
                      now_ms: int,
                      k: int = DEFAULT_TOP_K,
                      metric: str = "latency_ms") -> FeatureVector:
    """Deterministic feature vector for predicting `metric` at now_ms.

    History lags h1..h5 are the metric over the most recent 5 samples
    (h1 newest). Satellites are ordered by descending elevation; absent
    slots hold the -1 sentinel and a False validity flag.
    """
    history = window.last_values(metric, HISTORY_LAGS)
    if len(history) < HISTORY_LAGS:
        raise InsufficientHistory(
            f"need {HISTORY_LAGS} contiguous {metric} values, have {len(history)}")
    lags = list(reversed(history))  # h1 = most recent

    t = datetime.fromtimestamp(now_ms / 1000.0, tz=timezone.utc)
    vis = visible_sats(orbital.site, orbital.catalog, t)
    values: list[float] = [orbital.site.latitude_deg, orbital.site.longitude_deg,
                           orbital.site.altitude_m]
    valid: list[bool] = []
    for i in range(k):
        if i < len(vis):
            values += [vis[i].azimuth_deg, vis[i].elevation_deg, vis[i].range_km]
            valid.append(True)
        else:
            values += [PAD_SENTINEL] * 3
            valid.append(False)
    latest = window.latest
    values += [latest.az_deg, latest.el_deg]
    values += lags
    values.append(float((now_ms // 1000) % 86400))
    return FeatureVector(tuple(values), tuple(valid), feature_names(k))


# --- datasets ------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    ts_ms: np.ndarray           # (n,)
    targets: np.ndarray         # (n,)
    features: np.ndarray        # (n, d)
    feature_names: tuple[str, ...]

    def __post_init__(self):
        n = len(self.ts_ms)
        if not (len(self.targets) == n and self.features.shape[0] == n):
            raise ValueError("row count mismatch")
        if self.features.shape[1] != len(self.feature_names):
            raise ValueError("feature name/column mismatch")
        if n and np.any(np.diff(self.ts_ms) <= 0):
            raise ValueError("dataset must be chronologically ordered")

    def __len__(self) -> int:
        return len(self.ts_ms)

    def column(self, name: str) -> np.ndarray:
        return self.features[:, self.feature_names.index(name)]

    def temporal_split(self, train_frac: float = 19 / 24) -> tuple["Dataset", "Dataset"]:
        """Chronological split; every test timestamp follows all train ones."""
        if not 0.0 < train_frac < 1.0:
            raise ValueError("train_frac must be in (0, 1)")
        cut = int(round(len(self) * train_frac))
        cut = min(max(cut, 1), len(self) - 1)
        take = lambda sl: Dataset(self.ts_ms[sl], self.targets[sl],
                                  self.features[sl], self.feature_names)
        return take(slice(None, cut)), take(slice(cut, None))

    def to_csv(self) -> str:
        header = "ts_ms,target," + ",".join(self.feature_names)
        lines = [header]
        for i in range(len(self)):
            feats = ",".join(f"{v:.10g}" for v in self.features[i])
            lines.append(f"{int(self.ts_ms[i])},{self.targets[i]:.10g},{feats}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = lines[0].split(",")
        if header[:2] != ["ts_ms", "target"]:
            raise ValueError("dataset CSV must start with ts_ms,target")
        names = tuple(header[2:])
        ts, targets, rows = [], [], []
        for ln in lines[1:]:
            parts = ln.split(",")
            ts.append(int(parts[0]))
            targets.append(float(parts[1]))
            rows.append([float(p) for p in parts[2:]])
        return cls(np.array(ts, dtype=np.int64), np.array(targets),
                   np.array(rows, dtype=float), names)


def dataset_from_trace(samples, orbital: OrbitalContext,
                       k: int = DEFAULT_TOP_K,
                       metric: str = "latency_ms") -> Dataset:
    """Replay a telemetry trace into supervised rows: features at t predict
    the metric observed at t."""
    from .telemetry import METRIC_GETTERS
    getter = METRIC_GETTERS[metric]
    window = TelemetryWindow(capacity=HISTORY_LAGS + 1)
    ts, targets, rows = [], [], []
    names = feature_names(k)
    for s in samples:
        target = getter(s)
        if len(window) >= HISTORY_LAGS and target is not None:
            try:
                fv = assemble_features(window, orbital, s.ts_ms, k=k, metric=metric)
            except InsufficientHistory:
                fv = None
            if fv is not None:
                ts.append(s.ts_ms)
                targets.append(target)
                rows.append(fv.values)
        if getter(s) is not None:
            window.push(s)
    if not rows:
        raise InsufficientHistory("trace too short to build any rows")
    return Dataset(np.array(ts, dtype=np.int64), np.array(targets),
                   np.array(rows, dtype=float), names)


# --- models --------------------------------------------------------------

class Model:
    kind = "?"

    def predict_row(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


def _lag_indices(names: tuple[str, ...]) -> list[int]:
    try:
        return [names.index(f"h{i}") for i in range(1, HISTORY_LAGS + 1)]
    except ValueError as exc:
        raise ValueError("dataset has no h1..h5 history columns") from exc


@dataclass
class PersistenceModel(Model):
    kind = "persistence"
    h1_index: int
    feature_names: tuple[str, ...]

    def predict_row(self, x: np.ndarray) -> float:
        return float(x[self.h1_index])

    def to_json(self) -> dict:
        return {"format_version": MODEL_FORMAT_VERSION, "kind": self.kind,
                "h1_index": self.h1_index, "feature_names": list(self.feature_names)}


@dataclass
class HarmonicMeanModel(Model):
    kind = "harmonic_mean"
    lag_indices: tuple[int, ...]
    feature_names: tuple[str, ...]

    def predict_row(self, x: np.ndarray) -> float:
        lags = x[list(self.lag_indices)]
        if np.any(lags <= 0):
            return float(np.mean(lags))  # harmonic mean undefined; fall back
        return float(len(lags) / np.sum(1.0 / lags))

    def to_json(self) -> dict:
        return {"format_version": MODEL_FORMAT_VERSION, "kind": self.kind,
                "lag_indices": list(self.lag_indices),
                "feature_names": list(self.feature_names)}


@dataclass
class RidgeARModel(Model):
    kind = "ridge_ar"
    lag_indices: tuple[int, ...]
    feature_names: tuple[str, ...]
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    beta: np.ndarray  # standardized-space coefficients
    lam: float

    def predict_row(self, x: np.ndarray) -> float:
        lags = np.asarray(x, dtype=float)[list(self.lag_indices)]
        z = (lags - self.x_mean) / self.x_std
        return float(z @ self.beta * self.y_std + self.y_mean)

    @property
    def coefficients(self) -> np.ndarray:
        """Lag coefficients mapped back to the raw scale."""
        return self.beta * self.y_std / self.x_std

    def to_json(self) -> dict:
        return {"format_version": MODEL_FORMAT_VERSION, "kind": self.kind,
                "lag_indices": list(self.lag_indices),
                "feature_names": list(self.feature_names),
                "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std,
                "beta": self.beta.tolist(), "lam": self.lam}


def _fit_ridge_ar(dataset: Dataset, lam: float = RIDGE_LAMBDA) -> RidgeARModel:
    idx = _lag_indices(dataset.feature_names)
    X = dataset.features[:, idx]
    y = dataset.targets
    x_mean, x_std = X.mean(axis=0), X.std(axis=0)
    keep = x_std > 0
    if not np.any(keep):
        raise DegenerateDesign("all lag columns constant")
    if not np.all(keep):
        log.warning("dropping %d constant lag columns", int(np.count_nonzero(~keep)))
    x_std_safe = np.where(keep, x_std, 1.0)
    y_mean, y_std = float(y.mean()), float(y.std())
    if y_std == 0:
        y_std = 1.0
    Z = (X - x_mean) / x_std_safe
    Z[:, ~keep] = 0.0
    t = (y - y_mean) / y_std
    d = Z.shape[1]
    beta = np.linalg.solve(Z.T @ Z + lam * np.eye(d), Z.T @ t)
    beta[~keep] = 0.0
    return RidgeARModel(tuple(idx), dataset.feature_names, x_mean, x_std_safe,
                        y_mean, y_std, beta, lam)


# --- gradient-boosted trees ---------------------------------------------

@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def predict(self, x: np.ndarray) -> float:
        node = self
        while not node.is_leaf:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node.value

    def to_json(self) -> dict:
        if self.is_leaf:
            return {"value": self.value}
        return {"feature": self.feature, "threshold": self.threshold,
                "left": self.left.to_json(), "right": self.right.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "TreeNode":
        if "value" in obj:
            return cls(value=float(obj["value"]))
        return cls(feature=int(obj["feature"]), threshold=float(obj["threshold"]),
                   left=cls.from_json(obj["left"]), right=cls.from_json(obj["right"]))


def _best_split(X: np.ndarray, residuals: np.ndarray, min_leaf: int):
    """Exact greedy split minimizing squared error; returns
    (feature, threshold, sse_gain) or None."""
    n, d = X.shape
    if n < 2 * min_leaf:
        return None
    total_sum = residuals.sum()
    base_sse_term = -(total_sum ** 2) / n
    best = None
    for f in range(d):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        rs = residuals[order]
        csum = np.cumsum(rs)[:-1]
        left_n = np.arange(1, n)
        right_n = n - left_n
        # -(sum^2/n) terms of the two children; lower is better
        with np.errstate(divide="ignore", invalid="ignore"):
            score = -(csum ** 2) / left_n - ((total_sum - csum) ** 2) / right_n
        valid = (xs[:-1] != xs[1:]) & (left_n >= min_leaf) & (right_n >= min_leaf)
        if not np.any(valid):
            continue
        score = np.where(valid, score, np.inf)
        i = int(np.argmin(score))
        gain = base_sse_term - score[i]
        if gain > 1e-12 and (best is None or gain > best[2]):
            best = (f, float((xs[i] + xs[i + 1]) / 2.0), float(gain))
    return best


def _fit_tree(X: np.ndarray, residuals: np.ndarray, depth: int,
              max_depth: int, min_leaf: int) -> TreeNode:
    node = TreeNode(value=float(residuals.mean()))
    if depth >= max_depth:
        return node
    split = _best_split(X, residuals, min_leaf)
    if split is None:
        return node
    f, thr, _ = split
    mask = X[:, f] <= thr
    node.feature, node.threshold = f, thr
    node.left = _fit_tree(X[mask], residuals[mask], depth + 1, max_depth, min_leaf)
    node.right = _fit_tree(X[~mask], residuals[~mask], depth + 1, max_depth, min_leaf)
    return node


@dataclass
class GBRTModel(Model):
    kind = "gbrt"
    init_value: float
    learning_rate: float
    trees: list
    feature_names: tuple[str, ...]
    kept_columns: tuple[int, ...]

    def predict_row(self, x: np.ndarray) -> float:
        xk = np.asarray(x, dtype=float)[list(self.kept_columns)]
        out = self.init_value
        for tree in self.trees:
            out += self.learning_rate * tree.predict(xk)
        return out

    def to_json(self) -> dict:
        return {"format_version": MODEL_FORMAT_VERSION, "kind": self.kind,
                "init_value": self.init_value, "learning_rate": self.learning_rate,
                "kept_columns": list(self.kept_columns),
                "feature_names": list(self.feature_names),
                "trees": [t.to_json() for t in self.trees]}


def _fit_gbrt(dataset: Dataset, n_trees: int = 200, max_depth: int = 3,
              learning_rate: float = 0.1, min_leaf: int = 5) -> GBRTModel:
    if n_trees > 200 or max_depth > 3:
        raise ValueError("ensemble budget: <= 200 trees of depth <= 3")
    X_full = dataset.features
    stds = X_full.std(axis=0)
    kept = np.nonzero(stds > 0)[0]
    if len(kept) == 0:
        raise DegenerateDesign("all feature columns constant")
    if len(kept) < X_full.shape[1]:
        log.warning("dropping %d constant feature columns",
                    X_full.shape[1] - len(kept))
    X = X_full[:, kept]
    y = dataset.targets.astype(float)
    init = float(y.mean())
    pred = np.full(len(y), init)
    trees: list[TreeNode] = []
    for _ in range(n_trees):
        residuals = y - pred
        tree = _fit_tree(X, residuals, 0, max_depth, min_leaf)
        if tree.is_leaf and abs(tree.value) < 1e-12:
            break
        trees.append(tree)
        pred += learning_rate * np.array([tree.predict(row) for row in X])
    return GBRTModel(init, learning_rate, trees, dataset.feature_names,
                     tuple(int(i) for i in kept))


# --- fit / predict / persistence -----------------------------------------

MODEL_KINDS = ("persistence", "harmonic_mean", "ridge_ar", "gbrt")


def fit(model_kind: str, dataset: Dataset, **hyper) -> Model:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if model_kind == "persistence":
        idx = _lag_indices(dataset.feature_names)
        return PersistenceModel(idx[0], dataset.feature_names)
    if model_kind == "harmonic_mean":
        idx = _lag_indices(dataset.feature_names)
        return HarmonicMeanModel(tuple(idx), dataset.feature_names)
    if model_kind == "ridge_ar":
        return _fit_ridge_ar(dataset, **hyper)
    if model_kind == "gbrt":
        return _fit_gbrt(dataset, **hyper)
    raise ValueError(f"unknown model kind {model_kind!r}; choose from {MODEL_KINDS}")


def predict(model: Model, features) -> float:
    if isinstance(features, FeatureVector):
        features = features.as_array()
    return model.predict_row(np.asarray(features, dtype=float))


def predict_batch(model: Model, dataset: Dataset) -> np.ndarray:
    return np.array([model.predict_row(row) for row in dataset.features])


def save_model(model: Model, path: str) -> None:
    with open(path, "w") as f:
        json.dump(model.to_json(), f, indent=1)


def load_model(path: str) -> Model:
    with open(path) as f:
        obj = json.load(f)
    version = obj.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    kind = obj["kind"]
    names = tuple(obj["feature_names"])
    if kind == "persistence":
        return PersistenceModel(int(obj["h1_index"]), names)
    if kind == "harmonic_mean":
        return HarmonicMeanModel(tuple(obj["lag_indices"]), names)
    if kind == "ridge_ar":
        return RidgeARModel(tuple(obj["lag_indices"]), names,
                            np.array(obj["x_mean"]), np.array(obj["x_std"]),
                            float(obj["y_mean"]), float(obj["y_std"]),
                            np.array(obj["beta"]), float(obj["lam"]))
    if kind == "gbrt":
        return GBRTModel(float(obj["init_value"]), float(obj["learning_rate"]),
                         [TreeNode.from_json(t) for t in obj["trees"]],
                         names, tuple(obj["kept_columns"]))
    raise ValueError(f"unknown model kind in file: {kind!r}")


# --- evaluation ----------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    mape_pct: float
    rmse: float
    within5_pct: float
    within10_pct: float

    def __post_init__(self):
        if self.within5_pct > self.within10_pct + 1e-9:
            raise ValueError("within5 cannot exceed within10")


def evaluate(model: Model, test: Dataset) -> EvalReport:
    if len(test) == 0:
        raise ValueError("empty test set")
    actual = test.targets
    if np.any(actual <= 0):
        raise ZeroActual("MAPE needs strictly positive actuals")
    pred = predict_batch(model, test)
    rel = np.abs(pred - actual) / actual
    return EvalReport(
        mape_pct=float(rel.mean() * 100.0),
        rmse=float(np.sqrt(np.mean((pred - actual) ** 2))),
        within5_pct=float(np.mean(rel <= 0.05) * 100.0),
        within10_pct=float(np.mean(rel <= 0.10) * 100.0),
    )
