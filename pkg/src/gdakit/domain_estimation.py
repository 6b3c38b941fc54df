"""Domain label estimation: cluster the self-supervised features, plus NMI diagnostics.

Cluster indices are anonymous (no cross-run meaning); evaluation code matches
them to ground truth with the Hungarian algorithm when an agreement score is
needed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .contrastive import SslConfig, extract_features, train_ssl
from .core import BlindedView, GdaDataset
from .mixture import MixtureModel, fit_gmm, responsibilities
from .transforms import GridSpec


@dataclass
class DomainEstimate:
    assignments: np.ndarray        # (m,) cluster index in [0, k)
    responsibilities: np.ndarray   # (m, k) rows on the simplex
    model: MixtureModel


def estimate_domains(
    view: BlindedView,
    encoder,
    k: int,
    restarts: int = 5,
    seed: int = 0,
) -> DomainEstimate:
    """Assign every sample a cluster from a mixture fit on clean-pass features."""
    features = extract_features(encoder, view.images())
    return cluster_features(features, k, restarts=restarts, seed=seed)


def cluster_features(features: np.ndarray, k: int, restarts: int = 5, seed: int = 0) -> DomainEstimate:
    model = fit_gmm(features, k, restarts=restarts, seed=seed)
    resp = responsibilities(model, features)
    return DomainEstimate(
        assignments=np.argmax(resp, axis=1),
        responsibilities=resp,
        model=model,
    )


def nmi(labels_a, labels_b) -> float:
    """Mutual information normalized by the geometric mean of the entropies.

    Defined as 0 when either labeling is constant, except 1 when the two
    partitions are identical.
    """
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"label arrays differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("labels must be non-empty")

    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    n = a.size
    contingency = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(contingency, (ai, bi), 1.0)
    pij = contingency / n
    pa = pij.sum(axis=1)
    pb = pij.sum(axis=0)

    ha = -np.sum(pa * np.log(pa, where=pa > 0, out=np.zeros_like(pa)))
    hb = -np.sum(pb * np.log(pb, where=pb > 0, out=np.zeros_like(pb)))
    if ha <= 0 or hb <= 0:
        # A one-block partition equals the other partition iff that one is
        # also a single block.
        return 1.0 if (ha <= 0 and hb <= 0) else 0.0

    mask = pij > 0
    mi = float(np.sum(pij[mask] * np.log(pij[mask] / np.outer(pa, pb)[mask])))
    return float(np.clip(mi / np.sqrt(ha * hb), 0.0, 1.0))


def agreement(assignments, true_labels) -> float:
    """Fraction of samples matched after the optimal cluster-to-label relabeling."""
    a = np.asarray(assignments).ravel()
    t = np.asarray(true_labels).ravel()
    if a.shape != t.shape:
        raise ValueError("assignments and labels differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, ti = np.unique(t, return_inverse=True)
    size = max(ai.max(), ti.max()) + 1
    contingency = np.zeros((size, size))
    np.add.at(contingency, (ai, ti), 1.0)
    rows, cols = linear_sum_assignment(-contingency)
    return float(contingency[rows, cols].sum() / a.size)


@dataclass(frozen=True)
class GridNmiRow:
    g: int
    nmi_domain: float
    nmi_class: float


def nmi_curve(
    dataset: GdaDataset,
    grids: list[GridSpec],
    cfg: SslConfig,
    domain_k: int | None = None,
    class_k: int | None = None,
) -> list[GridNmiRow]:
    """Train one encoder per grid size and report cluster NMI against ground truth.

    Evaluation-context diagnostic: reads true class and domain labels. Each
    target labeling gets its own mixture fit with a matching component count.
    """
    true_domains = np.array([s.domain_label for s in dataset])
    true_classes = np.array([s.class_label for s in dataset])
    k_d = domain_k or len(set(true_domains.tolist()))
    k_c = class_k or len(set(true_classes.tolist()))

    rows = []
    for grid in grids:
        encoder, _ = train_ssl(BlindedView(dataset), replace(cfg, grid=grid))
        features = extract_features(encoder, [s.image for s in dataset])
        est_d = cluster_features(features, k_d, seed=cfg.seed)
        est_c = cluster_features(features, k_c, seed=cfg.seed)
        rows.append(GridNmiRow(
            g=grid.g,
            nmi_domain=nmi(est_d.assignments, true_domains),
            nmi_class=nmi(est_c.assignments, true_classes),
        ))
    return rows


@dataclass(frozen=True)
class ClusterCountRow:
    k: int
    nmi_domain: float


def cluster_count_curve(dataset: GdaDataset, cfg: SslConfig, ks: list[int]) -> list[ClusterCountRow]:
    """NMI against true domains for a range of cluster counts on one shared encoder."""
    encoder, _ = train_ssl(BlindedView(dataset), cfg)
    features = extract_features(encoder, [s.image for s in dataset])
    true_domains = np.array([s.domain_label for s in dataset])
    return [
        ClusterCountRow(k=k, nmi_domain=nmi(cluster_features(features, k, seed=cfg.seed).assignments, true_domains))
        for k in ks
    ]


def export_estimate(path: str | Path, estimate: DomainEstimate) -> None:
    """Write the per-sample cluster assignment CSV (`sample_index,cluster`)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_index", "cluster"])
        for i, c in enumerate(estimate.assignments):
            writer.writerow([i, int(c)])


def load_estimate_assignments(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = sorted((int(r["sample_index"]), int(r["cluster"])) for r in reader)
    if not rows:
        raise ValueError(f"no assignments in {path}")
    idx = np.array([r[0] for r in rows])
    if not np.array_equal(idx, np.arange(len(rows))):
        raise ValueError("sample_index column must cover 0..m-1 exactly")
    return np.array([r[1] for r in rows])
