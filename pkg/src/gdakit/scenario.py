"""Masking directives: which (domain, class) cells keep visible class labels.

A directive like ``"d0(0-3), d1(4-7)"`` labels classes 0..3 in domain d0 and
4..7 in d1; everything else (and every class mentioned in no clause) stays
unlabeled. `labeled_fraction` below 1 leaves part of each labeled cell
unlabeled, which is what turns a fully-labeled-classes instance into the
partially-labeled variant.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Mapping

from .core import GdaDataset
from .transforms import rng_stream


class ScenarioParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class ScenarioSpec:
    """Parsed masking directive plus the sampling knobs."""

    clauses: tuple[tuple[str, frozenset[int]], ...]
    labeled_fraction: float = 1.0
    hide_domain_labels: bool = True

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")

    @property
    def domain_names(self) -> list[str]:
        return [name for name, _ in self.clauses]

    def classes_for(self, name: str) -> frozenset[int]:
        for clause_name, classes in self.clauses:
            if clause_name == name:
                return classes
        return frozenset()


_CLAUSE_RE = re.compile(r"\s*([A-Za-z_]\w*)\s*\(\s*([0-9,\-\s]*)\)\s*")


def parse_scenario(
    text: str,
    labeled_fraction: float = 1.0,
    hide_domain_labels: bool = True,
) -> ScenarioSpec:
    """Parse comma-separated ``name(lo-hi[,lo-hi...])`` clauses."""
    if not text or not text.strip():
        raise ScenarioParseError("empty scenario", 0)
    clauses: list[tuple[str, frozenset[int]]] = []
    seen: set[str] = set()
    pos = 0
    while pos < len(text):
        m = _CLAUSE_RE.match(text, pos)
        if not m:
            raise ScenarioParseError(f"malformed clause near {text[pos:pos + 20]!r}", pos)
        name, body = m.group(1), m.group(2)
        if name in seen:
            raise ScenarioParseError(f"duplicate clause for domain {name!r}", m.start(1))
        seen.add(name)
        clauses.append((name, _parse_ranges(body, m.start(2))))
        pos = m.end()
        if pos < len(text):
            if text[pos] != ",":
                raise ScenarioParseError(f"expected ',' between clauses, found {text[pos]!r}", pos)
            pos += 1
    return ScenarioSpec(tuple(clauses), labeled_fraction, hide_domain_labels)


def _parse_ranges(body: str, offset: int) -> frozenset[int]:
    classes: set[int] = set()
    for item in body.split(","):
        token = item.strip()
        if not token:
            raise ScenarioParseError("empty class range", offset)
        if "-" in token:
            lo_s, _, hi_s = token.partition("-")
            try:
                lo, hi = int(lo_s), int(hi_s)
            except ValueError:
                raise ScenarioParseError(f"bad range {token!r}", offset) from None
            if lo > hi:
                raise ScenarioParseError(f"invalid range {token!r}: lower bound exceeds upper", offset)
            classes.update(range(lo, hi + 1))
        else:
            try:
                classes.add(int(token))
            except ValueError:
                raise ScenarioParseError(f"bad class {token!r}", offset) from None
        offset += len(item) + 1
    return frozenset(classes)


def resolve_domains(spec: ScenarioSpec, domain_names: Mapping[str, int] | None) -> dict[str, int]:
    """Map clause names to integer domain labels; default convention is ``d<int>``."""
    mapping: dict[str, int] = {}
    for name in spec.domain_names:
        if domain_names is not None:
            if name not in domain_names:
                raise ValueError(f"unknown domain name {name!r}")
            mapping[name] = int(domain_names[name])
        else:
            m = re.fullmatch(r"d(\d+)", name)
            if not m:
                raise ValueError(
                    f"unknown domain name {name!r}: pass domain_names or use d<int> names"
                )
            mapping[name] = int(m.group(1))
    return mapping


def apply_scenario(
    dataset: GdaDataset,
    spec: ScenarioSpec,
    seed: int = 0,
    domain_names: Mapping[str, int] | None = None,
) -> GdaDataset:
    """Set the visibility flags according to the directive; ground truth untouched.

    Within every matching (domain, class) cell a seeded uniform subset of
    round(labeled_fraction * cell size) samples keeps its class label visible
    (half-up rounding), the rest are hidden.
    """
    mapping = resolve_domains(spec, domain_names)
    available = set(dataset.domains)
    missing = [name for name, d in mapping.items() if d not in available]
    if missing:
        raise ValueError(f"scenario names domains absent from the dataset: {missing}")

    labeled_classes = {mapping[name]: spec.classes_for(name) for name in spec.domain_names}
    cells: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(dataset):
        key = (s.domain_label, s.class_label)
        if s.class_label in labeled_classes.get(s.domain_label, frozenset()):
            cells.setdefault(key, []).append(i)

    visible: set[int] = set()
    for (d, c), indices in sorted(cells.items()):
        n_lab = int(len(indices) * spec.labeled_fraction + 0.5)
        rng = rng_stream(seed, d, c)
        chosen = rng.choice(len(indices), size=n_lab, replace=False) if n_lab else []
        visible.update(indices[j] for j in chosen)

    domain_visible = not spec.hide_domain_labels
    return GdaDataset([
        replace(s, class_visible=(i in visible), domain_visible=domain_visible)
        for i, s in enumerate(dataset)
    ])
