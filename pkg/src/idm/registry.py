"""Model descriptor cards bound to lightweight reference executors.

Each descriptor is a natural-language model card (name, features,
application scenarios, usage steps) whose role dispatches to a classical
executor that fulfills the same analytical purpose at desk scale. All
executors are pure given (dataset, config, seed) and report standard fit
metrics on a held-out split.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import IdmError
from .store import Dataset, parse_timestamp

ROLES = ("forecast", "spatial", "pattern", "importance", "routing", "irregularity")

MIN_ROWS = {"forecast": 48}
MIN_ROWS_DEFAULT = 24


class MissingColumns(IdmError):
    """Dataset lacks columns the executor requires."""


class InsufficientRows(IdmError):
    """Dataset is below the executor's minimum row count."""


@dataclass(frozen=True)
class ModelDescriptor:
    name: str
    features: str
    application_scenarios: str
    usage_steps: str
    executor_role: str

    def __post_init__(self) -> None:
        for f in (self.name, self.features, self.application_scenarios, self.usage_steps):
            if not f.strip():
                raise ValueError("descriptor text fields must be nonempty")
        if self.executor_role not in ROLES:
            raise ValueError(f"unknown executor role {self.executor_role!r}")


@dataclass
class ModelResult:
    role: str
    predictions: list[float]
    labels: list[float]
    scores: list[dict]
    metrics: dict[str, float]
    fitted_params: str
    holdout_spec: str

    def __post_init__(self) -> None:
        if not self.metrics:
            raise ValueError("metrics must be nonempty")
        if "RMSE" in self.metrics and self.metrics["RMSE"] < 0:
            raise ValueError("RMSE must be >= 0")
        if "R2" in self.metrics and self.metrics["R2"] > 1:
            raise ValueError("R2 must be <= 1")


# -- metric helpers ---------------------------------------------------------


def mae(pred, truth) -> float:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred, truth) -> float:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def r_squared(pred, truth) -> float:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    ss_res = float(np.sum((truth - pred) ** 2))
    ss_tot = float(np.sum((truth - np.mean(truth)) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return 1.0 - ss_res / ss_tot


def _regression_metrics(pred, truth) -> dict[str, float]:
    return {"MAE": mae(pred, truth), "RMSE": rmse(pred, truth), "R2": r_squared(pred, truth)}


# -- dataset plumbing -------------------------------------------------------


def _temporal_column(d: Dataset) -> str | None:
    for c in d.columns:
        if c.kind == "temporal":
            return c.name
    return None


def _numeric_columns(d: Dataset) -> list[str]:
    return [c.name for c in d.columns if c.kind == "numeric"]


def _target_column(d: Dataset, preferred: tuple[str, ...] = ("speed", "volume", "occupancy")) -> str:
    numeric = _numeric_columns(d)
    if not numeric:
        raise MissingColumns("executor requires at least one numeric column")
    lowered = {n.lower(): n for n in numeric}
    for name in preferred:
        if name in lowered:
            return lowered[name]
    return numeric[0]


def _series(d: Dataset, target: str, time_col: str) -> tuple[list, np.ndarray]:
    """Mean of `target` per timestamp, sorted by time."""
    sums: dict[str, list[float]] = {}
    t_idx = d.column_names().index(time_col)
    v_idx = d.column_names().index(target)
    for row in d.rows:
        ts, val = row[t_idx], row[v_idx]
        if ts is None or val is None:
            continue
        sums.setdefault(ts, []).append(float(val))
    stamps = sorted(sums)
    values = np.array([np.mean(sums[ts]) for ts in stamps])
    return stamps, values


def _require_rows(role: str, n: int) -> None:
    needed = MIN_ROWS.get(role, MIN_ROWS_DEFAULT)
    if n < needed:
        raise InsufficientRows(f"{role} executor needs >= {needed} rows, got {n}")


def _ridge_fit(x: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    ones = np.ones((len(x), 1))
    xa = np.hstack([ones, x])
    gram = xa.T @ xa + alpha * np.eye(xa.shape[1])
    return np.linalg.solve(gram, xa.T @ y)


def _ridge_predict(x: np.ndarray, beta: np.ndarray) -> np.ndarray:
    ones = np.ones((len(x), 1))
    return np.hstack([ones, x]) @ beta


def _stratified_split(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic ~20% holdout spread evenly across the row order."""
    idx = np.arange(n)
    test_mask = idx % 5 == 4
    return idx[~test_mask], idx[test_mask]


# -- executors --------------------------------------------------------------


def _run_forecast(d: Dataset, seed: int) -> ModelResult:
    time_col = _temporal_column(d)
    if time_col is None:
        raise MissingColumns("forecast executor requires a temporal column")
    target = _target_column(d)
    stamps, y = _series(d, target, time_col)
    _require_rows("forecast", len(y))

    step_min = 1
    if len(stamps) > 1:
        diffs = [
            (parse_timestamp(b) - parse_timestamp(a)).total_seconds() / 60
            for a, b in zip(stamps[:-1], stamps[1:])
        ]
        step_min = max(1, int(np.median(diffs)))
    daily = max(1, 1440 // step_min)

    n = len(y)
    alpha = 1e-6
    if n >= 2 * daily + 8:
        # Seasonal regression on daily lags; holdout capped at one day so
        # every lag resolves to an observed value.
        lags = [daily, 2 * daily] if n >= 2 * daily + 8 else [daily]
        n_test = min(max(1, n // 5), daily)
        max_lag = max(lags)
        t0 = max_lag
        features = np.column_stack([y[t0 - lag : n - lag] for lag in lags])
        targets = y[t0:]
        split = len(targets) - n_test
        beta = _ridge_fit(features[:split], targets[:split], alpha)
        preds = _ridge_predict(features[split:], beta)
        truth = targets[split:]
        spec = f"temporal tail of {n_test} steps; seasonal lags {lags}"
        params = f"ridge(alpha={alpha}) on seasonal lags {lags}, {split} training steps"
        holdout_stamps = stamps[t0 + split :]
    else:
        # Short series: order-2 autoregression with recursive multi-step
        # prediction over the tail.
        lags = [1, 2]
        n_test = max(1, n // 5)
        split = n - n_test
        hist = list(y[:split])
        feats = np.column_stack([y[2 - lag : split - lag] for lag in lags])
        beta = _ridge_fit(feats, y[2:split], alpha)
        preds_list: list[float] = []
        for _ in range(n_test):
            x = np.array([[hist[-1], hist[-2]]])
            nxt = float(_ridge_predict(x, beta)[0])
            preds_list.append(nxt)
            hist.append(nxt)
        preds = np.array(preds_list)
        truth = y[split:]
        spec = f"temporal tail of {n_test} steps; recursive AR(2)"
        params = f"ridge(alpha={alpha}) AR(2), {split} training steps"
        holdout_stamps = stamps[split:]

    scores = [
        {"timestamp": ts, "predicted": float(p), "actual": float(a)}
        for ts, p, a in zip(holdout_stamps, preds, truth)
    ]
    return ModelResult(
        role="forecast",
        predictions=[float(p) for p in preds],
        labels=[float(a) for a in truth],
        scores=scores,
        metrics=_regression_metrics(preds, truth),
        fitted_params=params,
        holdout_spec=spec,
    )


def _pivot_by_detector(d: Dataset, target: str, time_col: str, det_col: str):
    import pandas as pd

    frame = d.to_frame()[[time_col, det_col, target]].dropna()
    pivot = frame.pivot_table(index=time_col, columns=det_col, values=target, aggfunc="mean")
    return pivot.sort_index()


def _run_spatial(d: Dataset, seed: int) -> ModelResult:
    names = [c.name.lower() for c in d.columns]
    if "detector_id" not in names:
        raise MissingColumns("spatial executor requires a detector_id column")
    time_col = _temporal_column(d)
    if time_col is None:
        raise MissingColumns("spatial executor requires a temporal column")
    target = _target_column(d)
    det_col = d.column_names()[names.index("detector_id")]
    pivot = _pivot_by_detector(d, target, time_col, det_col).dropna()
    _require_rows("spatial", len(pivot))
    if pivot.shape[1] < 2:
        raise MissingColumns("spatial executor requires at least two detectors")

    train_idx, test_idx = _stratified_split(len(pivot))
    train, test = pivot.iloc[train_idx], pivot.iloc[test_idx]
    corr = train.corr()

    preds: list[float] = []
    truth: list[float] = []
    scores: list[dict] = []
    for det in pivot.columns:
        partners = corr[det].drop(index=det).abs()
        best = partners.idxmax()
        x_tr, y_tr = train[best].to_numpy(), train[det].to_numpy()
        beta = _ridge_fit(x_tr.reshape(-1, 1), y_tr, 1e-6)
        p = _ridge_predict(test[best].to_numpy().reshape(-1, 1), beta)
        preds.extend(float(v) for v in p)
        truth.extend(float(v) for v in test[det].to_numpy())
        scores.append({"detector": str(det), "best_neighbor": str(best), "correlation": float(corr[det][best])})

    return ModelResult(
        role="spatial",
        predictions=preds,
        labels=truth,
        scores=scores,
        metrics=_regression_metrics(preds, truth),
        fitted_params=f"cross-detector correlation over {pivot.shape[1]} detectors",
        holdout_spec="stratified 20% of timestamps (every fifth row)",
    )


def _run_pattern(d: Dataset, seed: int) -> ModelResult:
    numeric = _numeric_columns(d)
    if not numeric:
        raise MissingColumns("pattern executor requires numeric columns")
    frame = d.to_frame()[numeric].dropna()
    _require_rows("pattern", len(frame))
    x = frame.to_numpy(dtype=float)

    train_idx, test_idx = _stratified_split(len(x))
    x_train, x_test = x[train_idx], x[test_idx]
    mean = x_train.mean(axis=0)
    std = x_train.std(axis=0)
    std[std == 0] = 1.0
    z_train = (x_train - mean) / std
    z_test = (x_test - mean) / std

    k = max(1, min(len(numeric) - 1, 2)) if len(numeric) > 1 else 1
    _, _, vt = np.linalg.svd(z_train, full_matrices=False)
    components = vt[:k]
    recon = (z_test @ components.T) @ components
    errors = np.sqrt(np.mean((z_test - recon) ** 2, axis=1))

    preds = [float(v) for v in recon.flatten()]
    truth = [float(v) for v in z_test.flatten()]
    scores = [{"row": int(i), "reconstruction_error": float(e)} for i, e in zip(test_idx, errors)]
    return ModelResult(
        role="pattern",
        predictions=preds,
        labels=truth,
        scores=scores,
        metrics=_regression_metrics(preds, truth),
        fitted_params=f"principal-component reconstruction, {k} components over {len(numeric)} columns",
        holdout_spec="stratified 20% of rows (every fifth row)",
    )


def _run_importance(d: Dataset, seed: int) -> ModelResult:
    from sklearn.tree import DecisionTreeRegressor

    target = _target_column(d)
    features = [n for n in _numeric_columns(d) if n != target]
    if not features:
        raise MissingColumns("importance executor requires at least one numeric feature besides the target")
    frame = d.to_frame()[features + [target]].dropna()
    _require_rows("importance", len(frame))

    x = frame[features].to_numpy(dtype=float)
    y = frame[target].to_numpy(dtype=float)
    train_idx, test_idx = _stratified_split(len(x))
    tree = DecisionTreeRegressor(max_depth=5, random_state=seed)
    tree.fit(x[train_idx], y[train_idx])
    preds = tree.predict(x[test_idx])
    truth = y[test_idx]
    base_rmse = rmse(preds, truth)

    rng = np.random.default_rng(seed)
    scores = []
    for j, feat in enumerate(features):
        shuffled = x[test_idx].copy()
        rng.shuffle(shuffled[:, j])
        drop = rmse(tree.predict(shuffled), truth) - base_rmse
        scores.append({"feature": feat, "importance": float(max(0.0, drop))})
    scores.sort(key=lambda s: -s["importance"])

    return ModelResult(
        role="importance",
        predictions=[float(p) for p in preds],
        labels=[float(t) for t in truth],
        scores=scores,
        metrics=_regression_metrics(preds, truth),
        fitted_params=f"depth-5 regression tree predicting {target} from {features}",
        holdout_spec="stratified 20% of rows (every fifth row)",
    )


def _run_routing(d: Dataset, seed: int) -> ModelResult:
    import networkx as nx

    names = {c.name.lower(): c.name for c in d.columns}
    for required in ("detector_id", "route", "milepost", "speed"):
        if required not in names:
            raise MissingColumns(f"routing executor requires a {required} column")
    frame = d.to_frame().dropna(subset=[names["speed"]])
    _require_rows("routing", len(frame))

    train_idx, test_idx = _stratified_split(len(frame))
    train, test = frame.iloc[train_idx], frame.iloc[test_idx]

    def edge_times(part):
        speeds = part.groupby([names["route"], names["detector_id"]]).agg(
            milepost=(names["milepost"], "first"), speed=(names["speed"], "mean")
        )
        times: dict[tuple[str, str], float] = {}
        for route, group in speeds.groupby(level=0):
            ordered = group.sort_values("milepost")
            dets = [i[1] for i in ordered.index]
            mps = ordered["milepost"].to_list()
            spds = ordered["speed"].to_list()
            for (a, b, m1, m2, s1, s2) in zip(dets, dets[1:], mps, mps[1:], spds, spds[1:]):
                dist = max(0.1, abs(m2 - m1))
                avg_speed = max(1.0, (s1 + s2) / 2)
                times[(a, b)] = dist / avg_speed * 60  # minutes
        return times

    t_train = edge_times(train)
    t_test = edge_times(test)
    graph = nx.Graph()
    for (a, b), w in t_train.items():
        graph.add_edge(a, b, weight=w)
    # Bridge routes through a common interchange so paths can cross routes.
    routes = frame.groupby(names["route"])[names["detector_id"]].first()
    for a in routes:
        for b in routes:
            if a != b and not graph.has_edge(a, b):
                graph.add_edge(a, b, weight=5.0)

    nodes = sorted(graph.nodes)
    source, dest = nodes[0], nodes[-1]
    path = nx.shortest_path(graph, source, dest, weight="weight")
    cost = nx.path_weight(graph, path, weight="weight")

    shared = [e for e in t_train if e in t_test]
    preds = [t_train[e] for e in shared] or [cost]
    truth = [t_test[e] for e in shared] or [cost]
    scores = [{"path": path, "travel_time_minutes": float(cost)}]
    return ModelResult(
        role="routing",
        predictions=[float(p) for p in preds],
        labels=[float(t) for t in truth],
        scores=scores,
        metrics=_regression_metrics(preds, truth),
        fitted_params=f"travel-time shortest path over {graph.number_of_nodes()} detectors",
        holdout_spec="edge travel times re-estimated on stratified 20% of rows",
    )


def _run_irregularity(d: Dataset, seed: int, window: int = 30, z_threshold: float = 6.0) -> ModelResult:
    time_col = _temporal_column(d)
    if time_col is None:
        raise MissingColumns("irregularity executor requires a temporal column")
    target = _target_column(d, preferred=("speed",))
    names = [c.name.lower() for c in d.columns]
    det_col = d.column_names()[names.index("detector_id")] if "detector_id" in names else None

    frame = d.to_frame()
    groups = frame.groupby(det_col) if det_col else [("all", frame)]

    preds: list[float] = []
    truth: list[float] = []
    flagged: list[dict] = []
    total_rows = 0
    for det, g in groups:
        g = g.sort_values(time_col)
        y = g[target].to_numpy(dtype=float)
        stamps = g[time_col].to_list()
        total_rows += len(y)
        if len(y) < window * 2:
            continue
        series = np.asarray(y)
        roll_mean = np.convolve(series, np.ones(window) / window, mode="valid")
        roll_sq = np.convolve(series**2, np.ones(window) / window, mode="valid")
        roll_std = np.sqrt(np.maximum(1e-9, roll_sq - roll_mean**2))
        # Value at t judged against the trailing window ending at t-1.
        for t in range(window, len(series)):
            mu, sd = roll_mean[t - window], max(roll_std[t - window], 1e-6)
            preds.append(float(mu))
            truth.append(float(series[t]))
            z = (series[t] - mu) / sd
            if z < -z_threshold:
                flagged.append({"detector": str(det), "timestamp": stamps[t], "z": float(z)})
    _require_rows("irregularity", total_rows)
    if not preds:
        raise InsufficientRows(f"irregularity executor needs >= {2 * window} rows per detector")

    merged = _merge_flags(flagged)
    return ModelResult(
        role="irregularity",
        predictions=preds,
        labels=truth,
        scores=merged,
        metrics=_regression_metrics(preds, truth),
        fitted_params=f"rolling z-score, window={window} steps, threshold={z_threshold}",
        holdout_spec="trailing-window one-step-ahead residuals (no refit)",
    )


def _merge_flags(flags: list[dict], max_gap_minutes: int = 15) -> list[dict]:
    """Collapse consecutive per-minute flags into event windows."""
    windows: list[dict] = []
    for f in sorted(flags, key=lambda f: (f["detector"], f["timestamp"])):
        ts = parse_timestamp(f["timestamp"])
        if windows and windows[-1]["detector"] == f["detector"]:
            last_end = parse_timestamp(windows[-1]["end"])
            if (ts - last_end).total_seconds() / 60 <= max_gap_minutes:
                windows[-1]["end"] = f["timestamp"]
                windows[-1]["peak_z"] = min(windows[-1]["peak_z"], f["z"])
                continue
        windows.append({"detector": f["detector"], "start": f["timestamp"], "end": f["timestamp"], "peak_z": f["z"]})
    return windows


_EXECUTORS = {
    "forecast": _run_forecast,
    "spatial": _run_spatial,
    "pattern": _run_pattern,
    "importance": _run_importance,
    "routing": _run_routing,
    "irregularity": _run_irregularity,
}


DEFAULT_DESCRIPTORS = (
    ModelDescriptor(
        name="LSTM",
        features="Recurrent sequence model capturing long-term temporal patterns in traffic series.",
        application_scenarios="Traffic speed and volume forecasting over minutes to days, including recurring congestion.",
        usage_steps="Provide a time-ordered series with a timestamp column; the model learns seasonal structure and predicts the held-out tail.",
        executor_role="forecast",
    ),
    ModelDescriptor(
        name="GNN",
        features="Graph model over the detector network capturing spatial relationships between locations.",
        application_scenarios="Understanding how conditions propagate between nearby detectors along and across routes.",
        usage_steps="Provide observations with detector_id, route and milepost; the model relates each detector to its strongest neighbors.",
        executor_role="spatial",
    ),
    ModelDescriptor(
        name="Autoencoder",
        features="Compression model that learns typical traffic patterns and measures reconstruction error.",
        application_scenarios="Detecting recurring traffic patterns and profiling how far observations deviate from them.",
        usage_steps="Provide numeric observation columns; rows with high reconstruction error deviate from the dominant pattern.",
        executor_role="pattern",
    ),
    ModelDescriptor(
        name="RandomForest",
        features="Tree ensemble for tabular reasoning with feature importance readout.",
        application_scenarios="Identifying which measured factors drive an outcome such as speed drops or accident risk.",
        usage_steps="Provide numeric feature columns and an implicit target; importances rank the features by predictive contribution.",
        executor_role="importance",
    ),
    ModelDescriptor(
        name="ReinforcementLearning",
        features="Sequential decision model used here for optimal routing selection over the detector network.",
        application_scenarios="Suggesting minimum travel-time routes between locations given observed speeds.",
        usage_steps="Provide observations with detector_id, route, milepost and speed; the model returns the minimum-cost path and its expected travel time.",
        executor_role="routing",
    ),
    ModelDescriptor(
        name="HMM",
        features="State-based sequence model for detecting traffic flow irregularities.",
        application_scenarios="Flagging sudden speed drops and anomalous windows such as incidents.",
        usage_steps="Provide a time-ordered series per detector; windows whose behavior departs from the learned regime are flagged.",
        executor_role="irregularity",
    ),
)


class ModelRegistry:
    """Registry of descriptors; dispatches runs to bound executors."""

    def __init__(self, descriptors: tuple[ModelDescriptor, ...] = DEFAULT_DESCRIPTORS) -> None:
        self._descriptors = tuple(descriptors)
        by_name = {d.name for d in self._descriptors}
        if len(by_name) != len(self._descriptors):
            raise ValueError("descriptor names must be unique")

    @classmethod
    def from_file(cls, path: str) -> "ModelRegistry":
        import yaml

        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
        descriptors = tuple(
            ModelDescriptor(
                name=name,
                features=card["features"],
                application_scenarios=card["application_scenarios"],
                usage_steps=card["usage_steps"],
                executor_role=card["executor_role"],
            )
            for name, card in doc.items()
        )
        return cls(descriptors)

    def list_descriptors(self) -> list[ModelDescriptor]:
        return list(self._descriptors)

    def get(self, name: str) -> ModelDescriptor | None:
        for d in self._descriptors:
            if d.name.lower() == name.lower():
                return d
        return None

    def by_role(self, role: str) -> ModelDescriptor:
        for d in self._descriptors:
            if d.executor_role == role:
                return d
        raise KeyError(role)

    def descriptor_document(self) -> str:
        """JSON model-card document for analysis prompts."""
        import json

        doc = {
            d.name: {
                "features": d.features,
                "application_scenarios": d.application_scenarios,
                "usage_steps": d.usage_steps,
            }
            for d in self._descriptors
        }
        return json.dumps(doc, indent=2)

    def run(self, descriptor: ModelDescriptor, task: str, d: Dataset, seed: int = 0) -> ModelResult:
        if descriptor.executor_role not in _EXECUTORS:
            raise ValueError(f"no executor bound for role {descriptor.executor_role!r}")
        return _EXECUTORS[descriptor.executor_role](d, seed)
