"""Downstream metrics: zero-shot, linear probe, K-NN, retrieval, clustering.

All scoring here is deterministic: ranking and voting ties are broken
toward the lowest index or smallest label, never by RNG state.
"""

import math
from dataclasses import dataclass, fields

import numpy as np

from . import data as datamod
from . import encoders, prototypes
from .errors import ConfigError, ContractError

EPS = 1e-12


def _check_paired(name, a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ContractError(f"{name} needs matching row counts, got {a.shape} and {b.shape}")
    return a, b


def zero_shot(test_z, class_rows, test_labels):
    """Top-1 accuracy of nearest class anchor by dot product.

    Rows of test_z and class_rows are expected unit length; class_rows has
    one row per class, in class-index order. Ties go to the lower class.
    """
    test_z = np.asarray(test_z, dtype=np.float64)
    class_rows = np.asarray(class_rows, dtype=np.float64)
    if test_z.ndim != 2 or class_rows.ndim != 2 or test_z.shape[1] != class_rows.shape[1]:
        raise ContractError(
            f"zero_shot needs matching widths, got {test_z.shape} and {class_rows.shape}"
        )
    labels = np.asarray(test_labels)
    if labels.shape[0] != test_z.shape[0]:
        raise ContractError("one label per test row required")
    predicted = np.argmax(test_z @ class_rows.T, axis=1)
    return float(np.mean(predicted == labels))


def knn_classify(train_z, train_y, test_z, test_y, k=20):
    """Cosine K-NN majority vote; vote ties pick the smallest label."""
    train_z = np.asarray(train_z, dtype=np.float64)
    test_z = np.asarray(test_z, dtype=np.float64)
    if train_z.ndim != 2 or train_z.shape[0] == 0:
        raise ContractError("knn_classify needs a non-empty 2-D train set")
    if not 1 <= k <= train_z.shape[0]:
        raise ContractError(f"k={k} outside [1, {train_z.shape[0]}]")
    train_y = np.asarray(train_y)
    test_y = np.asarray(test_y)
    sims = prototypes.unit_rows(test_z) @ prototypes.unit_rows(train_z).T
    # stable sort so equal similarities resolve to the earlier train row
    neighbors = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    votes = train_y[neighbors]
    n_labels = int(max(train_y.max(), test_y.max())) + 1
    correct = 0
    for i in range(test_z.shape[0]):
        counts = np.bincount(votes[i], minlength=n_labels)
        correct += int(np.argmax(counts) == test_y[i])
    return correct / test_z.shape[0]


def linear_probe(train_z, train_y, test_z, test_y, iters=1000, lr=0.1):
    """Multinomial logistic regression on frozen features.

    Weights start at zero and take full-batch gradient steps with a fixed
    rate, so the result is deterministic with no random state at all.
    """
    train_z, test_z = np.asarray(train_z, np.float64), np.asarray(test_z, np.float64)
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    classes = np.unique(train_y)
    if classes.size < 2:
        raise ConfigError("linear probe needs at least two classes in train")
    n_classes = int(classes.max()) + 1
    n, d = train_z.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), train_y] = 1.0
    w = np.zeros((d, n_classes))
    b = np.zeros((1, n_classes))
    for _ in range(iters):
        logits = train_z @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - onehot) / n
        w -= lr * (train_z.T @ delta)
        b -= lr * delta.sum(axis=0, keepdims=True)
    predicted = np.argmax(test_z @ w + b, axis=1)
    return float(np.mean(predicted == test_y))


def _recall_ranks(sims):
    """Rank of the diagonal entry in each row; lower-index ties rank first."""
    n = sims.shape[0]
    true_vals = np.diag(sims)
    higher = (sims > true_vals[:, None]).sum(axis=1)
    tied_before = ((sims == true_vals[:, None]) & (np.arange(n)[None, :] < np.arange(n)[:, None])).sum(axis=1)
    return higher + tied_before


def retrieval_recall(z_image, z_text, ks=(1, 5, 10)):
    """Recall@k in both directions plus their mean, identity ground truth."""
    z_image, z_text = _check_paired("retrieval_recall", z_image, z_text)
    sims = z_image @ z_text.T
    ranks_i2t = _recall_ranks(sims)
    ranks_t2i = _recall_ranks(sims.T)
    out = {}
    for k in ks:
        out[f"image_to_text_r{k}"] = float(np.mean(ranks_i2t < k))
        out[f"text_to_image_r{k}"] = float(np.mean(ranks_t2i < k))
    out["mean_recall"] = float(np.mean([out[key] for key in out]))
    return out


def _contingency(labels_a, labels_b):
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ContractError(
            f"need two equal-length label vectors of size >= 2, got {a.shape} and {b.shape}"
        )
    _, a_idx = np.unique(a, return_inverse=True)
    _, b_idx = np.unique(b, return_inverse=True)
    table = np.zeros((a_idx.max() + 1, b_idx.max() + 1), dtype=np.int64)
    np.add.at(table, (a_idx, b_idx), 1)
    return table


def _comb2(x):
    return x * (x - 1) // 2


def ari(labels_a, labels_b):
    """Adjusted Rand index from the contingency table, exact arithmetic."""
    table = _contingency(labels_a, labels_b)
    n = int(table.sum())
    sum_cells = int(sum(_comb2(int(v)) for v in table.ravel()))
    sum_rows = int(sum(_comb2(int(v)) for v in table.sum(axis=1)))
    sum_cols = int(sum(_comb2(int(v)) for v in table.sum(axis=0)))
    total = _comb2(n)
    # ari = (index - expected) / (max_index - expected) over a common
    # denominator of 2*total, keeping everything in integers
    numerator = 2 * total * sum_cells - 2 * sum_rows * sum_cols
    denominator = total * (sum_rows + sum_cols) - 2 * sum_rows * sum_cols
    if denominator == 0:
        return 1.0
    return numerator / denominator


def _entropy(counts, n):
    counts = counts[counts > 0]
    p = counts / n
    return float(-(p * np.log(p)).sum())


def _mutual_information(table, n):
    mi = 0.0
    rows = table.sum(axis=1)
    cols = table.sum(axis=0)
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            nij = table[i, j]
            if nij > 0:
                mi += (nij / n) * math.log(n * nij / (rows[i] * cols[j]))
    return float(mi)


def _expected_mutual_information(table, n):
    """Mean MI over the permutation model via the hypergeometric law."""
    rows = table.sum(axis=1)
    cols = table.sum(axis=0)
    lg = math.lgamma
    emi = 0.0
    for a in rows:
        a = int(a)
        for b in cols:
            b = int(b)
            start = max(1, a + b - n)
            for nij in range(start, min(a, b) + 1):
                log_p = (
                    lg(a + 1) + lg(b + 1) + lg(n - a + 1) + lg(n - b + 1)
                    - lg(n + 1) - lg(nij + 1) - lg(a - nij + 1)
                    - lg(b - nij + 1) - lg(n - a - b + nij + 1)
                )
                emi += (nij / n) * math.log(n * nij / (a * b)) * math.exp(log_p)
    return emi


def ami(labels_a, labels_b):
    """Adjusted mutual information, max-entropy normalization."""
    table = _contingency(labels_a, labels_b)
    n = int(table.sum())
    h_a = _entropy(table.sum(axis=1), n)
    h_b = _entropy(table.sum(axis=0), n)
    if h_a < EPS and h_b < EPS:
        return 1.0
    mi = _mutual_information(table, n)
    emi = _expected_mutual_information(table, n)
    denominator = max(h_a, h_b) - emi
    if abs(denominator) < EPS:
        return 1.0 if abs(mi - emi) < EPS else 0.0
    return (mi - emi) / denominator


def cluster_eval(z, labels, n_clusters=None, n_restarts=3, kmeans_iters=20, seed=0):
    """Cluster z, keep the lowest-objective restart, score against labels."""
    labels = np.asarray(labels)
    if n_clusters is None:
        n_clusters = int(np.unique(labels).size)
    best = None
    for restart in range(n_restarts):
        candidate = prototypes.kmeans(
            z, n_clusters, max_iters=kmeans_iters, seed=seed + restart,
            space_tag="eval",
        )
        if best is None or candidate.objective < best.objective:
            best = candidate
    return ari(best.assignments, labels), ami(best.assignments, labels)


@dataclass
class EvalReport:
    zero_shot_top1: float
    linear_top1: float
    knn_top1: float
    image_to_text_r1: float
    image_to_text_r5: float
    image_to_text_r10: float
    text_to_image_r1: float
    text_to_image_r5: float
    text_to_image_r10: float
    mean_recall: float
    ari: float
    ami: float
    n_train: int
    n_test: int
    seed: int


def format_report(report):
    lines = []
    for f in fields(EvalReport):
        value = getattr(report, f.name)
        rendered = repr(float(value)) if f.type is float or f.type == "float" else str(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def _encode(model, ds, indices):
    z_image = encoders.forward_values(model.image_tower, ds.x_image[indices])
    z_text = encoders.forward_values(model.text_tower, ds.x_text[indices])
    return z_image, z_text


def evaluate_model(ds, cfg, model):
    """Score a model on the held-out split chosen by cfg.

    The split matches trainer.run exactly (same fraction, same seed), so
    nothing scored here was touched by training. Class anchors for
    zero-shot are per-class mean text inputs from the train split.
    """
    train_idx, test_idx = datamod.split_indices(
        ds.n_samples, cfg.split_fraction, cfg.seed_split
    )
    z_image_train, _ = _encode(model, ds, train_idx)
    z_image_test, z_text_test = _encode(model, ds, test_idx)
    zn_image_train = prototypes.unit_rows(z_image_train)
    zn_image_test = prototypes.unit_rows(z_image_test)
    zn_text_test = prototypes.unit_rows(z_text_test)
    y_train = ds.labels[train_idx]
    y_test = ds.labels[test_idx]

    anchors_x = datamod.class_text_means(ds, train_idx)
    anchors = prototypes.unit_rows(
        encoders.forward_values(model.text_tower, anchors_x)
    )

    recalls = retrieval_recall(zn_image_test, zn_text_test)
    ari_value, ami_value = cluster_eval(
        zn_image_test,
        y_test,
        n_clusters=ds.n_classes,
        n_restarts=cfg.eval_kmeans_restarts,
        kmeans_iters=cfg.kmeans_iters,
        seed=cfg.seed_eval,
    )
    return EvalReport(
        zero_shot_top1=zero_shot(zn_image_test, anchors, y_test),
        linear_top1=linear_probe(
            z_image_train, y_train, z_image_test, y_test,
            iters=cfg.probe_iters, lr=cfg.probe_lr,
        ),
        knn_top1=knn_classify(
            zn_image_train, y_train, zn_image_test, y_test, k=cfg.knn_k
        ),
        ari=ari_value,
        ami=ami_value,
        n_train=len(train_idx),
        n_test=len(test_idx),
        seed=cfg.seed_eval,
        **recalls,
    )
