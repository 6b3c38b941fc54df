"""Domain-adversarial classifier training with open-set pseudo-labeling.

The classifier is a shared feature extractor with a class head (K known
classes plus one UNK output) and a domain head behind a gradient reversal
layer. Training runs in two phases: supervised-plus-adversarial on the
labeled samples, then joint optimization where unlabeled samples carry
pseudo-labels initialized by an entropy threshold and refreshed by argmax
predictions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .contrastive import to_input_tensor, load_checkpoint, save_checkpoint
from .core import BlindedView
from .domain_estimation import DomainEstimate
from .transforms import rng_stream

logger = logging.getLogger(__name__)

ENTROPY_INIT = "entropy_init"
ARGMAX_UPDATE = "argmax_update"


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.clone()

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.lam * grad_output, None


def grad_reverse(x: torch.Tensor, lam: float) -> torch.Tensor:
    """Identity forward; backward multiplies the incoming gradient by -lam."""
    if lam < 0:
        raise ValueError(f"reversal strength must be >= 0, got {lam}")
    return _ReverseGrad.apply(x, float(lam))


class GradientReversal(nn.Module):
    def __init__(self, lam: float = 1.0):
        super().__init__()
        if lam < 0:
            raise ValueError(f"reversal strength must be >= 0, got {lam}")
        self.lam = lam

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return grad_reverse(x, self.lam)


def lambda_schedule(p: float, gamma: float) -> float:
    """Adversarial weight ramp: 0 at p=0, saturating toward 1 as p -> 1."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must be in [0, 1], got {p}")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return 2.0 / (1.0 + math.exp(-gamma * p)) - 1.0


def entropy(probs) -> float:
    """Shannon entropy of a probability vector, 0*log0 treated as 0."""
    p = np.asarray(probs, dtype=float).ravel()
    if p.size == 0 or np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("input is not a probability simplex")
    p = np.clip(p, 0.0, None)
    return float(-np.sum(p * np.log(p, where=p > 0, out=np.zeros_like(p))))


def _row_entropies(probs: np.ndarray) -> np.ndarray:
    p = np.clip(probs, 0.0, None)
    return -np.sum(p * np.log(p, where=p > 0, out=np.zeros_like(p)), axis=1)


def pseudo_labels_from_probs(probs: np.ndarray) -> np.ndarray:
    """Entropy-threshold rule over known-class probabilities.

    sigma is the in-batch median entropy; rows strictly above it become UNK
    (index K), the rest take their argmax known class. Ties at the median go
    to the argmax branch.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or probs.shape[0] < 2:
        raise ValueError("need a batch of at least two probability rows")
    k = probs.shape[1]
    ent = _row_entropies(probs)
    sigma = float(np.median(ent))
    return np.where(ent > sigma, k, np.argmax(probs, axis=1))


def init_pseudo_labels(model: "GdaClassifier", images: torch.Tensor) -> np.ndarray:
    """Initial pseudo-labels for a batch of unlabeled images.

    Class probabilities are read over the K known outputs only (the UNK
    logit has received no supervision yet).
    """
    model.eval()
    with torch.no_grad():
        logits, _ = model(images)
        probs = F.softmax(logits[:, : model.num_known], dim=1).numpy()
    return pseudo_labels_from_probs(probs)


def prior_regularizer(mean_predicted: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    """KL(prior || batch-mean prediction); discourages single-class collapse."""
    if mean_predicted.shape != prior.shape:
        raise ValueError("mean prediction and prior must have the same shape")
    if bool((prior <= 0).any()):
        raise ValueError("prior entries must be strictly positive")
    mp = torch.clamp(mean_predicted, min=1e-12)
    return torch.sum(prior * torch.log(prior / mp))


@dataclass(frozen=True)
class ClassifierSpec:
    in_channels: int = 3
    num_known: int = 2
    num_domains: int = 2
    dropout: float = 0.5
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.num_known < 1 or self.num_domains < 1:
            raise ValueError("num_known and num_domains must be >= 1")


class GdaClassifier(nn.Module):
    """Feature extractor + class head (K+1 outputs) + adversarial domain head."""

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        self.num_known = spec.num_known
        slope, p = spec.leaky_slope, spec.dropout
        self.features = nn.Sequential(
            nn.InstanceNorm2d(spec.in_channels),
            nn.Conv2d(spec.in_channels, 64, 5, padding=2), nn.LeakyReLU(slope), nn.BatchNorm2d(64),
            nn.Conv2d(64, 64, 5, padding=2), nn.LeakyReLU(slope), nn.BatchNorm2d(64),
            nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.LeakyReLU(slope), nn.BatchNorm2d(128),
            nn.Conv2d(128, 128, 3, stride=2, padding=1), nn.LeakyReLU(slope), nn.BatchNorm2d(128),
            nn.Flatten(),
            nn.Dropout(p),
        )
        feat_dim = 128 * 8 * 8
        self.class_head = nn.Sequential(
            nn.Linear(feat_dim, 100), nn.ReLU(), nn.BatchNorm1d(100),
            nn.Linear(100, 100), nn.ReLU(), nn.BatchNorm1d(100),
            nn.Linear(100, spec.num_known + 1),
        )
        self.grl = GradientReversal(0.0)
        self.domain_head = nn.Sequential(
            nn.Linear(feat_dim, 100), nn.ReLU(), nn.BatchNorm1d(100), nn.Dropout(p),
            nn.Linear(100, 100), nn.ReLU(), nn.BatchNorm1d(100), nn.Dropout(p),
            nn.Linear(100, spec.num_domains),
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.features(x)
        return self.class_head(feats), self.domain_head(self.grl(feats))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    gamma: float = 10.0
    pseudo_init_epoch: int = 20
    pseudo_update_epoch: int = 40
    prior: object = "uniform"          # "uniform" or a (K+1,) array
    lp_weight: float = 1.0
    refresh_every_epoch: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.pseudo_init_epoch < self.pseudo_update_epoch <= self.epochs):
            raise ValueError("need pseudo_init_epoch < pseudo_update_epoch <= epochs")
        if self.lp_weight < 0:
            raise ValueError("lp_weight must be non-negative")


@dataclass
class PseudoLabelState:
    """Per-unlabeled-sample current label (UNK = num_known) and its provenance."""

    indices: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray


@dataclass
class TrainLogRow:
    epoch: int
    loss_y: float
    loss_d: float
    loss_p: float
    lam: float
    train_acc: float


@dataclass
class TrainedClassifier:
    model: GdaClassifier
    known_classes: list[int]       # sorted raw labels; class index i <-> known_classes[i]
    log: list[TrainLogRow]
    pseudo: PseudoLabelState | None
    uses_unknown_output: bool

    @property
    def num_known(self) -> int:
        return len(self.known_classes)

    def predict_hard(self, images: Sequence[np.ndarray]) -> np.ndarray:
        """Hard labels in [0, K]; the UNK output is masked for models that never trained it."""
        probs = predict_batch(self.model, images)
        if not self.uses_unknown_output:
            probs = probs[:, : self.num_known]
        return np.argmax(probs, axis=1)


def _resolve_prior(prior, num_outputs: int) -> torch.Tensor:
    if isinstance(prior, str):
        if prior != "uniform":
            raise ValueError(f"unknown prior {prior!r}")
        return torch.full((num_outputs,), 1.0 / num_outputs, dtype=torch.float32)
    arr = np.asarray(prior, dtype=np.float32).ravel()
    if arr.shape != (num_outputs,):
        raise ValueError(f"prior must have {num_outputs} entries, got {arr.shape}")
    if np.any(arr <= 0) or abs(float(arr.sum()) - 1.0) > 1e-5:
        raise ValueError("prior must be a strictly positive simplex")
    return torch.from_numpy(arr)


def train_dann(
    view: BlindedView,
    domains: DomainEstimate | np.ndarray,
    spec: ClassifierSpec,
    cfg: TrainConfig,
) -> TrainedClassifier:
    """Two-phase adversarial training with estimated domain labels.

    Phase 1 (epoch < pseudo_init_epoch): class cross-entropy on labeled
    samples over the K known outputs plus the adversarial domain loss on all
    samples, with the reversal strength following `lambda_schedule` over
    global progress. At pseudo_init_epoch the unlabeled samples receive
    entropy-thresholded pseudo-labels; afterwards the class loss covers
    labeled and pseudo-labeled samples over K+1 outputs with the prior
    regularizer added. From pseudo_update_epoch on, pseudo-labels refresh to
    the argmax prediction.
    """
    assignments = domains.assignments if isinstance(domains, DomainEstimate) else np.asarray(domains)
    n = len(view)
    if len(assignments) != n:
        raise ValueError(f"domain estimate covers {len(assignments)} samples, dataset has {n}")

    labeled = view.labeled_indices()
    unlabeled = view.unlabeled_indices()
    if not labeled:
        raise ValueError("no labeled samples: the class loss is undefined")

    known_classes = sorted({view[i].class_label for i in labeled})
    class_to_idx = {c: i for i, c in enumerate(known_classes)}
    k = len(known_classes)
    if spec.num_known != k:
        raise ValueError(f"spec.num_known={spec.num_known} but the view exposes {k} labeled classes")
    if spec.num_domains < int(assignments.max()) + 1:
        raise ValueError("spec.num_domains smaller than the number of estimated domains")

    targets = np.full(n, -1, dtype=np.int64)
    for i in labeled:
        targets[i] = class_to_idx[view[i].class_label]
    dom_targets = torch.from_numpy(assignments.astype(np.int64))

    x_all = to_input_tensor(view.images())
    has_unlabeled = len(unlabeled) > 0
    # The UNK logit joins the class softmax only when pseudo-labels can ever
    # exist; otherwise phase 2 is literally phase 1 continued.
    use_unk = has_unlabeled
    prior = _resolve_prior(cfg.prior, k + 1)

    torch.manual_seed(cfg.seed)
    model = GdaClassifier(spec)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
    )

    pseudo: PseudoLabelState | None = None
    sup_targets = targets.copy()
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = max(2, cfg.epochs * steps_per_epoch)
    step = 0
    log: list[TrainLogRow] = []

    for epoch in range(cfg.epochs):
        if has_unlabeled and epoch == cfg.pseudo_init_epoch:
            pseudo = _init_all_pseudo_labels(model, x_all, unlabeled, cfg.batch_size)
            sup_targets = targets.copy()
            sup_targets[pseudo.indices] = pseudo.labels
        if (
            pseudo is not None
            and epoch >= cfg.pseudo_update_epoch
            and (epoch == cfg.pseudo_update_epoch or cfg.refresh_every_epoch)
        ):
            _refresh_pseudo_labels(model, x_all, pseudo, cfg.batch_size)
            sup_targets[pseudo.indices] = pseudo.labels

        phase2 = has_unlabeled and epoch >= cfg.pseudo_init_epoch
        order = rng_stream(cfg.seed, 2_000_000 + epoch).permutation(n)
        model.train()
        sums = {"y": 0.0, "d": 0.0, "p": 0.0}
        n_batches = 0
        correct = 0
        counted = 0
        lam = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # norm layers need more than one row
            lam = lambda_schedule(step / (total_steps - 1), cfg.gamma)
            step += 1
            model.grl.lam = lam
            xb = x_all[idx]
            class_logits, domain_logits = model(xb)

            batch_targets = torch.from_numpy(sup_targets[idx])
            sup_mask = batch_targets >= 0
            loss_y = class_logits.new_zeros(())
            if bool(sup_mask.any()):
                # Phase 2 implies use_unk; before that (and in datasets with no
                # unlabeled samples at all) the UNK logit stays out of the softmax.
                logits_y = class_logits if phase2 else class_logits[:, :k]
                loss_y = F.cross_entropy(logits_y[sup_mask], batch_targets[sup_mask])
                with torch.no_grad():
                    preds = torch.argmax(logits_y[sup_mask], dim=1)
                    correct += int((preds == batch_targets[sup_mask]).sum())
                    counted += int(sup_mask.sum())

            loss_d = F.cross_entropy(domain_logits, dom_targets[idx])
            loss = loss_y + loss_d

            loss_p = class_logits.new_zeros(())
            if phase2 and cfg.lp_weight > 0:
                mean_pred = F.softmax(class_logits, dim=1).mean(dim=0)
                loss_p = prior_regularizer(mean_pred, prior)
                loss = loss + cfg.lp_weight * loss_p

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sums["y"] += float(loss_y.detach())
            sums["d"] += float(loss_d.detach())
            sums["p"] += float(loss_p.detach())
            n_batches += 1

        log.append(TrainLogRow(
            epoch=epoch,
            loss_y=sums["y"] / max(1, n_batches),
            loss_d=sums["d"] / max(1, n_batches),
            loss_p=sums["p"] / max(1, n_batches),
            lam=lam,
            train_acc=correct / counted if counted else float("nan"),
        ))
        logger.info(
            "dann epoch %d/%d: loss_y %.4f loss_d %.4f loss_p %.4f lambda %.3f acc %.3f",
            epoch + 1, cfg.epochs, log[-1].loss_y, log[-1].loss_d, log[-1].loss_p, lam, log[-1].train_acc,
        )

    return TrainedClassifier(
        model=model,
        known_classes=known_classes,
        log=log,
        pseudo=pseudo,
        uses_unknown_output=use_unk,
    )


def _unlabeled_batches(unlabeled: list[int], batch_size: int) -> list[list[int]]:
    """Contiguous chunks; a trailing singleton is folded into the previous chunk."""
    chunks = [list(unlabeled[s:s + batch_size]) for s in range(0, len(unlabeled), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2].extend(chunks.pop())
    return chunks


def _init_all_pseudo_labels(
    model: GdaClassifier, x_all: torch.Tensor, unlabeled: list[int], batch_size: int
) -> PseudoLabelState:
    labels = np.empty(len(unlabeled), dtype=np.int64)
    pos = 0
    for chunk in _unlabeled_batches(sorted(unlabeled), batch_size):
        labels[pos:pos + len(chunk)] = init_pseudo_labels(model, x_all[chunk])
        pos += len(chunk)
    model.train()
    return PseudoLabelState(
        indices=np.asarray(sorted(unlabeled), dtype=np.int64),
        labels=labels,
        provenance=np.full(len(unlabeled), ENTROPY_INIT, dtype=object),
    )


def _refresh_pseudo_labels(
    model: GdaClassifier, x_all: torch.Tensor, pseudo: PseudoLabelState, batch_size: int
) -> None:
    model.eval()
    with torch.no_grad():
        pos = 0
        for start in range(0, len(pseudo.indices), batch_size):
            chunk = pseudo.indices[start:start + batch_size]
            logits, _ = model(x_all[chunk])
            probs = F.softmax(logits, dim=1).numpy()
            pseudo.labels[pos:pos + len(chunk)] = np.argmax(probs, axis=1)
            pos += len(chunk)
    pseudo.provenance[:] = ARGMAX_UPDATE
    model.train()


def predict(model: GdaClassifier, image: np.ndarray) -> tuple[np.ndarray, int]:
    """Class probabilities over K+1 outputs and the hard label (ties -> lowest index)."""
    probs = predict_batch(model, [image])
    return probs[0], int(np.argmax(probs[0]))


def predict_batch(model: GdaClassifier, images: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = to_input_tensor(list(images[start:start + batch_size]))
            logits, _ = model(x)
            out.append(F.softmax(logits, dim=1).numpy())
    return np.concatenate(out, axis=0)


def train_labeled_only(view: BlindedView, spec: ClassifierSpec, cfg: TrainConfig) -> TrainedClassifier:
    """Reference model trained on the labeled subset alone (no adversary, no pseudo-labels)."""
    labeled = view.labeled_indices()
    if not labeled:
        raise ValueError("no labeled samples")
    known_classes = sorted({view[i].class_label for i in labeled})
    class_to_idx = {c: i for i, c in enumerate(known_classes)}
    k = len(known_classes)
    if spec.num_known != k:
        raise ValueError(f"spec.num_known={spec.num_known} but the view exposes {k} labeled classes")

    x_all = to_input_tensor([view[i].image for i in labeled])
    y_all = torch.tensor([class_to_idx[view[i].class_label] for i in labeled])

    torch.manual_seed(cfg.seed)
    model = GdaClassifier(spec)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
    )
    n = len(labeled)
    log: list[TrainLogRow] = []
    for epoch in range(cfg.epochs):
        order = rng_stream(cfg.seed, 3_000_000 + epoch).permutation(n)
        model.train()
        total = 0.0
        n_batches = 0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            logits, _ = model(x_all[idx])
            loss = F.cross_entropy(logits[:, :k], y_all[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            correct += int((torch.argmax(logits[:, :k], dim=1) == y_all[idx]).sum())
            n_batches += 1
        log.append(TrainLogRow(
            epoch=epoch, loss_y=total / max(1, n_batches), loss_d=0.0, loss_p=0.0,
            lam=0.0, train_acc=correct / n,
        ))
    return TrainedClassifier(
        model=model, known_classes=known_classes, log=log, pseudo=None,
        uses_unknown_output=False,
    )


def entropy_rejection_threshold(bundle: TrainedClassifier, images: Sequence[np.ndarray]) -> float:
    """Median entropy of the known-class probabilities over the given images."""
    probs = predict_batch(bundle.model, images)[:, : bundle.num_known]
    probs = probs / probs.sum(axis=1, keepdims=True)
    return float(np.median(_row_entropies(probs)))


def predict_with_rejection(
    bundle: TrainedClassifier, images: Sequence[np.ndarray], sigma: float
) -> np.ndarray:
    """Hard labels where rows with known-class entropy above sigma become UNK."""
    probs = predict_batch(bundle.model, images)[:, : bundle.num_known]
    probs = probs / probs.sum(axis=1, keepdims=True)
    ent = _row_entropies(probs)
    return np.where(ent > sigma, bundle.num_known, np.argmax(probs, axis=1))


def save_classifier(path: str | Path, bundle: TrainedClassifier) -> None:
    save_checkpoint(path, "classifier", bundle.model.state_dict(), {
        "spec": bundle.model.spec,
        "known_classes": bundle.known_classes,
        "uses_unknown_output": bundle.uses_unknown_output,
    })


def load_classifier(path: str | Path) -> TrainedClassifier:
    state, meta = load_checkpoint(path, "classifier")
    model = GdaClassifier(meta["spec"])
    model.load_state_dict(state)
    model.eval()
    return TrainedClassifier(
        model=model,
        known_classes=list(meta["known_classes"]),
        log=[],
        pseudo=None,
        uses_unknown_output=bool(meta["uses_unknown_output"]),
    )
