"""Empirical bound terms and interpretability exports.

The adaptation bound has two estimable pieces: the weighted source risk
and the domain divergence, the latter realized here as the standard proxy
A-distance 2*(1 - 2*err) of a held-out linear domain classifier trained
on weighted examples. The remaining bound constants (the optimal combined
risk, the VC term, the confidence delta and the sample size they depend
on) are not estimable from data and are reported as such rather than
fabricated.

Weight-risk convention: this module normalizes weights to sum to one
(a probability mass over the evaluation set), unlike the per-batch
training convention where weights sum to the batch size.

CSV artifacts (one row per sample, deterministic bytes):

* weights_epoch{k}.csv:  sample_id,hidden_domain,raw_score,normalized_weight
* features_epoch{k}.csv: sample_id,hidden_domain,f_0..f_{d_f-1}
  (target rows carry hidden_domain 0 and ids indexing the target pool)
* bound_report.json: weighted_source_risk, proxy_divergence, unestimated
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression

from .networks import ModelBundle

UNESTIMATED_BOUND_TERMS = (
    "C",
    "optimal_combined_risk_lambda",
    "vc_dimension_d",
    "delta",
    "sample_size_m",
)


@dataclass(frozen=True)
class BoundReport:
    weighted_source_risk: float
    proxy_divergence: float
    unestimated: tuple[str, ...] = UNESTIMATED_BOUND_TERMS

    def to_json(self) -> str:
        return json.dumps(
            {
                "weighted_source_risk": self.weighted_source_risk,
                "proxy_divergence": self.proxy_divergence,
                "unestimated": list(self.unestimated),
            },
            indent=2,
        )


@dataclass(frozen=True)
class WeightDump:
    """Curriculum scores over a sample set at one training epoch. The
    normalized weights are computed over the whole dump as a single batch,
    so they are nonnegative and sum to the row count."""

    epoch: int
    sample_ids: np.ndarray
    hidden_domains: np.ndarray
    raw_scores: np.ndarray
    normalized_weights: np.ndarray


def save_weight_dump(dump: WeightDump, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "hidden_domain", "raw_score", "normalized_weight"])
        for i in range(dump.sample_ids.shape[0]):
            writer.writerow(
                [
                    int(dump.sample_ids[i]),
                    int(dump.hidden_domains[i]),
                    repr(float(dump.raw_scores[i])),
                    repr(float(dump.normalized_weights[i])),
                ]
            )


def load_weight_dump(path: str | Path, epoch: int | None = None) -> WeightDump:
    if epoch is None:
        stem = Path(path).stem
        digits = "".join(c for c in stem if c.isdigit())
        epoch = int(digits) if digits else 0
    ids, doms, raws, norms = [], [], [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:2] != ["sample_id", "hidden_domain"]:
            raise ValueError(f"{path}: not a weight dump")
        for row in reader:
            ids.append(int(row[0]))
            doms.append(int(row[1]))
            raws.append(float(row[2]))
            norms.append(float(row[3]))
    return WeightDump(
        epoch=epoch,
        sample_ids=np.array(ids, dtype=np.int64),
        hidden_domains=np.array(doms, dtype=np.int64),
        raw_scores=np.array(raws),
        normalized_weights=np.array(norms),
    )


# ---------------------------------------------------------------------------
# Bound terms


def proxy_a_distance(
    features_a: np.ndarray,
    features_b: np.ndarray,
    sample_weights_a: np.ndarray | None = None,
    seed: int = 0,
) -> float:
    """Proxy A-distance between two feature samples: train a linear domain
    classifier on half of each side, return max(0, 2*(1 - 2*err)) of its
    weighted held-out error. Side-a examples may carry nonnegative weights;
    each side contributes equal total mass."""
    a = np.asarray(features_a, dtype=np.float64).reshape(len(features_a), -1)
    b = np.asarray(features_b, dtype=np.float64).reshape(len(features_b), -1)
    if len(a) < 20 or len(b) < 20:
        raise ValueError("need at least 20 samples per side")
    if sample_weights_a is None:
        wa = np.ones(len(a))
    else:
        wa = np.asarray(sample_weights_a, dtype=np.float64)
        if wa.shape[0] != len(a):
            raise ValueError("weight/sample length mismatch")
        if (wa < 0).any():
            raise ValueError("weights must be nonnegative")
    wb = np.ones(len(b))

    rng = np.random.default_rng(seed)
    ia = rng.permutation(len(a))
    ib = rng.permutation(len(b))
    half_a, half_b = len(a) // 2, len(b) // 2
    if half_a < 10 or half_b < 10:
        raise ValueError("degenerate split sizes")

    def _sides(split_a, split_b):
        x = np.concatenate([a[split_a], b[split_b]])
        y = np.concatenate([np.zeros(len(split_a)), np.ones(len(split_b))])
        w = np.concatenate(
            [
                wa[split_a] / max(wa[split_a].sum(), 1e-12),
                wb[split_b] / wb[split_b].sum(),
            ]
        )
        return x, y, w

    x_tr, y_tr, w_tr = _sides(ia[:half_a], ib[:half_b])
    x_ho, y_ho, w_ho = _sides(ia[half_a:], ib[half_b:])

    clf = LogisticRegression(max_iter=1000)
    clf.fit(x_tr, y_tr, sample_weight=w_tr)
    err = float(np.sum(w_ho * (clf.predict(x_ho) != y_ho)) / np.sum(w_ho))
    return max(0.0, 2.0 * (1.0 - 2.0 * err))


def weighted_source_risk(
    bundle: ModelBundle,
    source_x: np.ndarray,
    source_y: np.ndarray,
    weights: np.ndarray | None = None,
) -> float:
    """Weighted 0/1 error of the class head over labeled source samples;
    `source_y` holds 0-based class indices. Weights are normalized to a
    probability mass over the evaluation set."""
    n = source_x.shape[0]
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != n or source_y.shape[0] != n:
        raise ValueError("mismatched lengths")
    weights = weights / weights.sum()
    errors = np.empty(n, dtype=np.float64)
    with torch.no_grad():
        for start in range(0, n, 512):
            xb = bundle.to_tensor(source_x[start : start + 512])
            pred = bundle.classifier(bundle.feature(xb)).argmax(dim=1).numpy()
            errors[start : start + 512] = pred != source_y[start : start + 512]
    return float(np.sum(weights * errors))


def extract_features(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    out = []
    with torch.no_grad():
        for start in range(0, x.shape[0], 512):
            out.append(bundle.feature(bundle.to_tensor(x[start : start + 512])).numpy())
    return np.concatenate(out)


def compute_bound_report(
    bundle: ModelBundle,
    source_x: np.ndarray,
    source_y: np.ndarray,
    target_x: np.ndarray,
    weights: np.ndarray | None = None,
    seed: int = 0,
) -> BoundReport:
    """Estimable bound terms for a weighted source distribution. Uniform
    weights reproduce the unweighted estimates exactly."""
    n = source_x.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    risk = weighted_source_risk(bundle, source_x, source_y, w)
    div = proxy_a_distance(
        extract_features(bundle, source_x),
        extract_features(bundle, target_x),
        sample_weights_a=w,
        seed=seed,
    )
    return BoundReport(weighted_source_risk=risk, proxy_divergence=div)


# ---------------------------------------------------------------------------
# Interpretability over weight dumps and metrics


def domain_preference_counts(dump: WeightDump, tau: float) -> dict[int, int]:
    """Per hidden domain, how many samples score strictly above tau."""
    if dump.sample_ids.shape[0] == 0:
        raise ValueError("empty weight dump")
    counts: dict[int, int] = {}
    for d in sorted(int(v) for v in np.unique(dump.hidden_domains)):
        mask = dump.hidden_domains == d
        counts[d] = int(np.sum(dump.raw_scores[mask] > tau))
    return counts


def weight_trajectory(metrics_path: str | Path) -> list[tuple[int, float, float]]:
    """(iter, w_mean, w_var) series from a metrics file; rows without
    weight statistics (source_only runs) are skipped."""
    out: list[tuple[int, float, float]] = []
    with open(metrics_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return out
        try:
            i_it = header.index("iter")
            i_mean = header.index("w_mean")
            i_var = header.index("w_var")
        except ValueError as e:
            raise ValueError(f"{metrics_path}: missing metrics column: {e}") from e
        for row in reader:
            if len(row) != len(header):
                raise ValueError(f"{metrics_path}: malformed row {row!r}")
            if row[i_mean] == "" or row[i_var] == "":
                continue
            out.append((int(row[i_it]), float(row[i_mean]), float(row[i_var])))
    return out


def rank_samples(
    dump: WeightDump,
    class_filter: int | None = None,
    labels_by_id: dict[int, int] | None = None,
) -> list[int]:
    """Sample ids sorted by normalized weight, heaviest first; ties break
    toward the lower id. `class_filter` restricts to one class label and
    requires an id->label mapping (see the run's source manifest)."""
    ids = dump.sample_ids
    weights = dump.normalized_weights
    if class_filter is not None:
        if labels_by_id is None:
            raise ValueError("class_filter requires labels_by_id")
        if class_filter not in set(labels_by_id.values()):
            raise ValueError(f"unknown class id {class_filter}")
        keep = np.array([labels_by_id[int(i)] == class_filter for i in ids])
        ids, weights = ids[keep], weights[keep]
    order = sorted(range(len(ids)), key=lambda k: (-weights[k], ids[k]))
    return [int(ids[k]) for k in order]


def export_features(
    bundle: ModelBundle,
    x: np.ndarray,
    sample_ids: np.ndarray,
    hidden_domains: np.ndarray,
    path: str | Path,
) -> None:
    """Write one feature row per sample for external embedding tools."""
    feats = extract_features(bundle, x)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["sample_id", "hidden_domain"] + [f"f_{j}" for j in range(feats.shape[1])]
        )
        for i in range(feats.shape[0]):
            writer.writerow(
                [int(sample_ids[i]), int(hidden_domains[i])]
                + [repr(float(v)) for v in feats[i]]
            )
