"""Self-supervised pretraining on class-destroyed images.

A small convolutional encoder is trained with the normalized
temperature-scaled cross-entropy (NT-Xent) loss over pairs of independently
shuffled and augmented views, so the learned features track whatever survives
the block shuffle: global appearance, i.e. the domain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import BlindedView
from .transforms import AugmentConfig, GridSpec, make_views, nn_resize, rng_stream

logger = logging.getLogger(__name__)

INPUT_SIZE = 32
EMBED_DIM = 64

_CKPT_MAGIC = b"GDAK"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class SslConfig:
    temperature: float = 0.5
    batch_size: int = 128
    epochs: int = 20
    learning_rate: float = 1e-3
    grid: GridSpec = GridSpec(3)
    augment: AugmentConfig = AugmentConfig()
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0 and learning_rate positive")


class DomainEncoder(nn.Module):
    """Conv encoder for 32x32 inputs producing a 64-d embedding."""

    def __init__(self, in_channels: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, padding=1), nn.ReLU(), nn.BatchNorm2d(16),
            nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(), nn.BatchNorm2d(32),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(), nn.BatchNorm2d(64),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(), nn.BatchNorm2d(64),
            nn.MaxPool2d(2),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Sequential(
            nn.Linear(64, 64), nn.ReLU(), nn.BatchNorm1d(64),
            nn.Linear(64, EMBED_DIM),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.conv(x).flatten(1)
        return self.head(z)


def nt_xent(embeddings: torch.Tensor, temperature: float) -> torch.Tensor:
    """NT-Xent loss over rows arranged as interleaved pairs (a0, b0, a1, b1, ...).

    Rows are L2-normalized; each of the 2N anchors scores its partner against
    the remaining 2N-2 rows under cosine similarity / temperature. Returns the
    mean cross-entropy over anchors; differentiable in `embeddings`.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if embeddings.ndim != 2 or embeddings.shape[0] % 2 != 0:
        raise ValueError(f"embeddings must be (2N, D), got {tuple(embeddings.shape)}")
    n2 = embeddings.shape[0]
    if n2 < 4:
        raise ValueError("need at least two pairs: no negatives exist otherwise")
    norms = embeddings.detach().norm(dim=1)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm embedding row cannot be normalized")

    z = F.normalize(embeddings, dim=1)
    sim = (z @ z.T) / temperature
    sim.fill_diagonal_(float("-inf"))
    targets = torch.arange(n2, device=embeddings.device) ^ 1
    return F.cross_entropy(sim, targets)


def to_input_tensor(images: list[np.ndarray]) -> torch.Tensor:
    """Stack HWC/HW float arrays into an NCHW tensor resized to 32x32."""
    prepared = []
    for img in images:
        if img.shape[:2] != (INPUT_SIZE, INPUT_SIZE):
            img = nn_resize(img, INPUT_SIZE, INPUT_SIZE)
        if img.ndim == 2:
            img = img[:, :, None]
        prepared.append(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))
    return torch.from_numpy(np.stack(prepared))


def infer_channels(images: list[np.ndarray]) -> int:
    chans = {1 if img.ndim == 2 else img.shape[2] for img in images}
    if len(chans) != 1:
        raise ValueError(f"mixed channel counts in dataset: {sorted(chans)}")
    return chans.pop()


def train_ssl(view: BlindedView, cfg: SslConfig) -> tuple[DomainEncoder, list[float]]:
    """Train the encoder on shuffled views; returns (encoder, per-epoch mean losses).

    Fully unsupervised: only images are read from the view, which the label
    read audit in the tests checks.
    """
    images = view.images()
    if not images:
        raise ValueError("empty dataset")
    torch.manual_seed(cfg.seed)
    model = DomainEncoder(infer_channels(images))
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    history: list[float] = []
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng_stream(cfg.seed, 1_000_000 + epoch).permutation(n)
        model.train()
        losses = []
        for start in range(0, n, cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            if len(batch_idx) < 2:
                continue
            views: list[np.ndarray] = []
            for i in batch_idx:
                a, b = make_views(images[i], cfg.grid, cfg.augment, rng_stream(cfg.seed, epoch, int(i)))
                views.extend((a, b))
            x = to_input_tensor(views)
            loss = nt_xent(model(x), cfg.temperature)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        history.append(mean_loss)
        logger.info("ssl epoch %d/%d: loss %.4f", epoch + 1, cfg.epochs, mean_loss)
    return model, history


def extract_features(model: DomainEncoder, images: list[np.ndarray], batch_size: int = 256) -> np.ndarray:
    """Clean forward pass (no shuffle, no augmentation) to 64-d features."""
    model.eval()
    feats = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = to_input_tensor(images[start:start + batch_size])
            feats.append(model(x).numpy())
    return np.concatenate(feats, axis=0)


def save_checkpoint(path: str | Path, kind: str, state: dict, meta: dict) -> None:
    """Single binary checkpoint file: magic + version header, then a torch payload."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + bytes([_CKPT_VERSION]))
        torch.save({"kind": kind, "state": state, "meta": meta}, fh)


def load_checkpoint(path: str | Path, expected_kind: str) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        header = fh.read(5)
        if header[:4] != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a gdakit checkpoint")
        if header[4] != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header[4]}")
        payload = torch.load(fh, weights_only=False)
    if payload["kind"] != expected_kind:
        raise ValueError(f"checkpoint holds a {payload['kind']!r}, expected {expected_kind!r}")
    return payload["state"], payload["meta"]


def save_encoder(path: str | Path, model: DomainEncoder) -> None:
    save_checkpoint(path, "encoder", model.state_dict(), {"in_channels": model.in_channels})


def load_encoder(path: str | Path) -> DomainEncoder:
    state, meta = load_checkpoint(path, "encoder")
    model = DomainEncoder(meta["in_channels"])
    model.load_state_dict(state)
    model.eval()
    return model
