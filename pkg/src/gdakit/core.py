"""Sample-level domain adaptation records and the scenario constraint table.

Every observation is a tuple (image, class label, domain label, two visibility
flags). Which adaptation problem a dataset realizes is decided purely from its
label-set structure and domain-visibility pattern; a dataset may satisfy
several rows at once, so the classifier returns a set of names.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

#: Distinguished symbol for samples whose true class is outside the known set.
UNK = "UNK"


class HiddenLabelError(LookupError):
    """Raised when training code reads a label whose visibility flag is off."""


class ScenarioName(enum.Enum):
    UDA = "UDA"
    MSDA = "MSDA"
    OSDA = "OSDA"
    MS_OSDA = "MS-OSDA"
    BTDA = "BTDA"
    GDA1 = "GDA1"
    GDA2 = "GDA2"

    def __str__(self) -> str:
        return self.value


@dataclass
class Sample:
    """One observation: pixel array plus ground-truth labels and visibility flags.

    `class_label` and `domain_label` are always recorded; the flags only
    govern what training code may read (see `BlindedView`).
    """

    image: np.ndarray
    class_label: int
    domain_label: int
    class_visible: bool = True
    domain_visible: bool = True

    def __post_init__(self):
        img = self.image
        if img.ndim not in (2, 3):
            raise ValueError(f"image must be 2-D or 3-D, got ndim={img.ndim}")
        if img.shape[0] < 1 or img.shape[1] < 1:
            raise ValueError(f"image dimensions must be positive, got {img.shape}")
        if img.ndim == 3 and img.shape[2] not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {img.shape[2]}")
        if float(img.min()) < 0.0 or float(img.max()) > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.class_label < 0 or self.domain_label < 0:
            raise ValueError("labels must be non-negative integers")


class GdaDataset:
    """Ordered, immutable-by-convention collection of samples."""

    def __init__(self, samples: Sequence[Sample]):
        self._samples = list(samples)

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, index: int) -> Sample:
        return self._samples[index]

    def __iter__(self) -> Iterator[Sample]:
        return iter(self._samples)

    @property
    def samples(self) -> list[Sample]:
        return self._samples

    @property
    def domains(self) -> list[int]:
        return sorted({s.domain_label for s in self._samples})

    @property
    def classes(self) -> list[int]:
        return sorted({s.class_label for s in self._samples})

    def subset(self, indices: Sequence[int]) -> "GdaDataset":
        return GdaDataset([self._samples[i] for i in indices])

    def with_flags(self, class_visible: bool = True, domain_visible: bool = True) -> "GdaDataset":
        """Copy with every visibility flag overwritten; ground truth untouched."""
        return GdaDataset([
            replace(s, class_visible=class_visible, domain_visible=domain_visible)
            for s in self._samples
        ])


@dataclass(frozen=True)
class DomainLabelSets:
    """Per-domain class sets: all classes, classes with labeled samples, classes with unlabeled samples."""

    classes: frozenset[int]
    labeled: frozenset[int]
    unlabeled: frozenset[int]


@dataclass(frozen=True)
class LabelSets:
    all_classes: frozenset[int]
    known_classes: frozenset[int]
    per_domain: dict[int, DomainLabelSets]


def compute_label_sets(dataset: GdaDataset) -> LabelSets:
    """Derive the global and per-domain class/label sets by direct comprehension."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    all_classes = frozenset(s.class_label for s in dataset)
    known = frozenset(s.class_label for s in dataset if s.class_visible)
    per_domain: dict[int, DomainLabelSets] = {}
    for d in dataset.domains:
        members = [s for s in dataset if s.domain_label == d]
        per_domain[d] = DomainLabelSets(
            classes=frozenset(s.class_label for s in members),
            labeled=frozenset(s.class_label for s in members if s.class_visible),
            unlabeled=frozenset(s.class_label for s in members if not s.class_visible),
        )
    return LabelSets(all_classes=all_classes, known_classes=known, per_domain=per_domain)


def classify_scenario(dataset: GdaDataset) -> set[ScenarioName]:
    """Return every scenario row whose full set of constraints the dataset satisfies.

    Rows are checked literally against the label-set structure, the number of
    domains, and the per-domain domain-visibility pattern. Every row requires
    at least two domains; mixed domain visibility within a single domain
    matches nothing.
    """
    sets_ = compute_label_sets(dataset)
    domains = dataset.domains
    if len(domains) < 2:
        return set()

    delta_d: dict[int, bool] = {}
    for d in domains:
        flags = {s.domain_visible for s in dataset if s.domain_label == d}
        if len(flags) != 1:
            return set()
        delta_d[d] = flags.pop()

    C = sets_.all_classes
    L = sets_.known_classes
    per = sets_.per_domain
    all_visible = all(delta_d.values())
    all_hidden = not any(delta_d.values())
    result: set[ScenarioName] = set()

    def fully_labeled(d: int) -> bool:
        return per[d].labeled == per[d].classes and not per[d].unlabeled

    def fully_unlabeled(d: int) -> bool:
        return not per[d].labeled and per[d].unlabeled == per[d].classes

    # Two-domain rows: one fully labeled source, one fully unlabeled target.
    if len(domains) == 2 and all_visible:
        for s, t in (domains, domains[::-1]):
            if fully_labeled(s) and fully_unlabeled(t):
                if per[s].classes == per[t].classes == C:
                    result.add(ScenarioName.UDA)
                if per[s].classes < per[t].classes and per[t].classes == C:
                    result.add(ScenarioName.OSDA)

    if all_visible:
        targets = [d for d in domains if fully_unlabeled(d)]
        if len(targets) == 1:
            j = targets[0]
            sources = [d for d in domains if d != j]
            if all(per[i].classes == C for i in domains) and all(
                fully_labeled(i) and per[i].labeled == L for i in sources
            ):
                result.add(ScenarioName.MSDA)
            open_targets = [
                d for d in targets
                if per[d].classes == C and all(per[i].classes < per[d].classes for i in domains if i != d)
            ]
            if len(open_targets) == 1 and all(
                fully_labeled(i) and per[i].labeled == L for i in sources
            ):
                result.add(ScenarioName.MS_OSDA)

    # Blending-target row: one visible labeled source, hidden unlabeled targets.
    srcs = [d for d in domains if fully_labeled(d)]
    if (
        len(srcs) == 1
        and all(per[i].classes == C for i in domains)
        and all(fully_unlabeled(i) for i in domains if i != srcs[0])
        and delta_d[srcs[0]]
        and all(not delta_d[i] for i in domains if i != srcs[0])
    ):
        result.add(ScenarioName.BTDA)

    # Blind rows: no domain labels anywhere, labeled class sets inconsistent.
    if all_hidden:
        inconsistent = any(
            per[i].labeled != per[j].labeled for i in domains for j in domains if i < j
        )
        if inconsistent:
            if all(not (per[k].labeled & per[k].unlabeled) for k in domains):
                result.add(ScenarioName.GDA1)
            if all(per[k].labeled < per[k].unlabeled for k in domains):
                result.add(ScenarioName.GDA2)
    return result


def oracle_target(sample: Sample, known: frozenset[int] | set[int]):
    """Ground-truth evaluation target: the class label if known, else UNK."""
    return sample.class_label if sample.class_label in known else UNK


class BlindedSample:
    """Access-checked wrapper: hidden labels raise instead of leaking."""

    __slots__ = ("_sample", "_view")

    def __init__(self, sample: Sample, view: "BlindedView"):
        self._sample = sample
        self._view = view

    @property
    def image(self) -> np.ndarray:
        return self._sample.image

    @property
    def class_visible(self) -> bool:
        return self._sample.class_visible

    @property
    def domain_visible(self) -> bool:
        return self._sample.domain_visible

    @property
    def class_label(self) -> int:
        if not self._sample.class_visible:
            raise HiddenLabelError("class label is hidden for this sample")
        self._view.class_reads += 1
        return self._sample.class_label

    @property
    def domain_label(self) -> int:
        if not self._sample.domain_visible:
            raise HiddenLabelError("domain label is hidden for this sample")
        self._view.domain_reads += 1
        return self._sample.domain_label


class BlindedView:
    """Training-side view of a dataset that enforces the visibility flags.

    Reads of visible labels are counted (`class_reads`, `domain_reads`) so
    tests can audit that unsupervised stages touch no labels at all.
    """

    def __init__(self, dataset: GdaDataset):
        self._dataset = dataset
        self.class_reads = 0
        self.domain_reads = 0

    def __len__(self) -> int:
        return len(self._dataset)

    def __getitem__(self, index: int) -> BlindedSample:
        return BlindedSample(self._dataset[index], self)

    def __iter__(self) -> Iterator[BlindedSample]:
        for s in self._dataset.samples:
            yield BlindedSample(s, self)

    def images(self) -> list[np.ndarray]:
        """All images in dataset order; never touches labels."""
        return [s.image for s in self._dataset.samples]

    def labeled_indices(self) -> list[int]:
        return [i for i, s in enumerate(self._dataset.samples) if s.class_visible]

    def unlabeled_indices(self) -> list[int]:
        return [i for i, s in enumerate(self._dataset.samples) if not s.class_visible]


MANIFEST_HEADER = ["path", "class_label", "domain_label", "class_visible", "domain_visible"]


def save_dataset(dataset: GdaDataset, out_dir: str | Path, manifest_name: str = "manifest.csv") -> Path:
    """Write PNG images plus a manifest CSV; paths are relative to the manifest."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / manifest_name
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for i, s in enumerate(dataset):
            rel = f"images/sample_{i:05d}.png"
            _write_png(out_dir / rel, s.image)
            writer.writerow([rel, s.class_label, s.domain_label,
                             int(s.class_visible), int(s.domain_visible)])
    return manifest_path


def load_manifest(manifest_path: str | Path) -> GdaDataset:
    """Load a dataset written by `save_dataset` (or hand-built to the same schema)."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    samples: list[Sample] = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"manifest missing columns: {sorted(missing)}")
        for row in reader:
            img = _read_png(base / row["path"])
            samples.append(Sample(
                image=img,
                class_label=int(row["class_label"]),
                domain_label=int(row["domain_label"]),
                class_visible=bool(int(row["class_visible"])),
                domain_visible=bool(int(row["domain_visible"])),
            ))
    if not samples:
        raise ValueError(f"manifest {manifest_path} has no rows")
    return GdaDataset(samples)


def _write_png(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        pass
    elif arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return (arr.astype(np.float32) / 255.0)
