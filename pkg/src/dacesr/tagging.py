from __future__ import annotations
from collections.abc import Iterable, Mapping, Sequence
import csv
import json
import math
from pathlib import Path
from typing import Optional, Protocol
import attr
import numpy as np
from numpy.typing import NDArray
from scipy import ndimage
from .consts import TAGGER_MIN_SIDE
from .errors import DegradationError, ParameterError
from .imgproc import DegradationSpec, ImageTensor, apply_chain, as_image, resize
from .imgproc.image import require_rgb
from .util import amap_ordered, log

TagSet = frozenset[str]

#: Number of chromatic hue bins
HUE_BINS = 12

#: Pixels with saturation below this fall into the achromatic hue bin
ACHROMATIC_SATURATION = 0.12

#: Minimum share of pixels for a hue bin to produce a token
HUE_MIN_MASS = 0.05

#: Thresholds on mean Sobel magnitude separating the eight edge levels
EDGE_LEVELS = (0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64)

#: Number of gradient-orientation bins over [0, π)
ORIENT_BINS = 8

#: Minimum share of gradient energy for an orientation bin to produce a token
ORIENT_MIN_MASS = 0.10

#: Gradients weaker than this do not vote for an orientation
ORIENT_MIN_MAGNITUDE = 0.05

#: Number of levels for luminance mean and spread
LUM_LEVELS = 6

#: Side of the grid of per-cell dominant-hue tokens
CELL_GRID = 4


def tagset(tags: Iterable[str]) -> TagSet:
    return frozenset(t.strip().lower() for t in tags if t.strip())


class Tagger(Protocol):
    name: str

    def tag(self, img: ImageTensor) -> TagSet: ...


def _hue_labels(img: ImageTensor) -> NDArray[np.int_]:
    """
    Per-pixel hue bin: 0 to ``HUE_BINS - 1`` for chromatic pixels, ``HUE_BINS``
    for achromatic ones
    """
    r, g, b = img[:, :, 0], img[:, :, 1], img[:, :, 2]
    mx = img.max(axis=2)
    mn = img.min(axis=2)
    chroma = mx - mn
    safe = np.where(chroma > 0, chroma, 1.0)
    hue = np.where(
        mx == r,
        ((g - b) / safe) % 6,
        np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4),
    )
    saturation = np.where(mx > 0, chroma / np.where(mx > 0, mx, 1.0), 0.0)
    bins = np.minimum((hue / 6.0 * HUE_BINS).astype(np.int_), HUE_BINS - 1)
    return np.where(saturation < ACHROMATIC_SATURATION, HUE_BINS, bins)


def _hue_name(label: int) -> str:
    return "gray" if label == HUE_BINS else str(label)


def _level(value: float, n: int) -> int:
    # Round off float noise so values on a level edge land on the upper level.
    return min(n - 1, max(0, math.floor(round(value * n, 9))))


def surrogate_tag(img: ImageTensor) -> TagSet:
    """
    Describe an image by tokens derived from quantized colour, edge,
    orientation, luminance and layout statistics.
    """
    img = as_image(img)
    require_rgb(img, "Tagging")
    h, w = img.shape[:2]
    if h < TAGGER_MIN_SIDE or w < TAGGER_MIN_SIDE:
        raise ParameterError(
            f"Images must be at least {TAGGER_MIN_SIDE}×{TAGGER_MIN_SIDE} to"
            f" tag, got {h}×{w}"
        )
    tags: set[str] = set()
    labels = _hue_labels(img)
    counts = np.bincount(labels.ravel(), minlength=HUE_BINS + 1) / labels.size
    for k in np.flatnonzero(counts >= HUE_MIN_MASS):
        tags.add(f"hue_{_hue_name(int(k))}")

    lum = img @ np.array([0.299, 0.587, 0.114])
    gx = ndimage.sobel(lum, axis=1, mode="nearest") / 4.0
    gy = ndimage.sobel(lum, axis=0, mode="nearest") / 4.0
    mag = np.hypot(gx, gy)
    tags.add(f"edge_{sum(mag.mean() > t for t in EDGE_LEVELS)}")

    strong = mag > ORIENT_MIN_MAGNITUDE
    if strong.any():
        theta = np.arctan2(gy[strong], gx[strong]) % np.pi
        obins = np.minimum((theta / np.pi * ORIENT_BINS).astype(np.int_), ORIENT_BINS - 1)
        energy = np.bincount(obins, weights=mag[strong], minlength=ORIENT_BINS)
        energy /= energy.sum()
        for k in np.flatnonzero(energy >= ORIENT_MIN_MASS):
            tags.add(f"orient_{k}")

    tags.add(f"lum_{_level(float(lum.mean()), LUM_LEVELS)}")
    # Standard deviation is at most 0.5 on [0, 1] data.
    tags.add(f"var_{_level(float(lum.std()) * 2.0, LUM_LEVELS)}")

    rows = np.array_split(np.arange(h), CELL_GRID)
    cols = np.array_split(np.arange(w), CELL_GRID)
    for ri, rr in enumerate(rows):
        for ci, cc in enumerate(cols):
            cell = labels[np.ix_(rr, cc)]
            dominant = int(np.bincount(cell.ravel(), minlength=HUE_BINS + 1).argmax())
            tags.add(f"cell_{ri}_{ci}_hue_{_hue_name(dominant)}")
    return tagset(tags)


@attr.define
class SurrogateTagger:
    name: str = "surrogate"

    def tag(self, img: ImageTensor) -> TagSet:
        return surrogate_tag(img)


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    a = frozenset(a)
    b = frozenset(b)
    union = a | b
    if not union:
        # Two empty descriptions are identical.
        return 1.0
    return len(a & b) / len(union)


@attr.define
class SimilarityRecord:
    spec_id: int
    mean_similarity: float
    n_images: int


@attr.define
class SimilarityReport:
    records: list[SimilarityRecord] = attr.Factory(list)

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self) -> dict[int, float]:
        return {r.spec_id: r.mean_similarity for r in self.records}

    def write_jsonl(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fp:
            for r in self.records:
                print(json.dumps(attr.asdict(r), sort_keys=True), file=fp)

    def write_csv(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fp:
            writer = csv.writer(fp)
            writer.writerow(["spec_id", "mean_similarity", "n_images"])
            for r in self.records:
                writer.writerow([r.spec_id, repr(r.mean_similarity), r.n_images])

    @classmethod
    def read_jsonl(cls, path: str | Path) -> SimilarityReport:
        records: list[SimilarityRecord] = []
        with open(path, encoding="utf-8") as fp:
            for line in fp:
                if line.strip():
                    records.append(SimilarityRecord(**json.loads(line)))
        return cls(records)


def severity_profile(
    hr_images: Sequence[ImageTensor],
    degradations: Sequence[DegradationSpec],
    tagger: Tagger,
    spec_ids: Optional[Sequence[int]] = None,
    jobs: Optional[int] = None,
) -> SimilarityReport:
    """
    Average Jaccard similarity between the tags of each clean image and the
    tags of its degraded version, per degradation
    """
    n = len(hr_images)
    m = len(degradations)
    if n < 1 or m < 1:
        raise ParameterError(
            f"Severity profiling needs at least one image and one degradation"
            f" (got {n} and {m})"
        )
    if spec_ids is None:
        spec_ids = list(range(m))
    log.info("Profiling %d degradations over %d images with %s", m, n, tagger.name)
    clean_tags = amap_ordered(tagger.tag, list(hr_images), jobs)

    def score(pair: tuple[int, int]) -> float:
        i, j = pair
        try:
            degraded = apply_chain(hr_images[j], degradations[i])
        except Exception as e:
            raise DegradationError(spec_ids[i], j, f"{type(e).__name__}: {e}") from e
        h, w = hr_images[j].shape[:2]
        if degraded.shape[:2] != (h, w):
            # Compare at the clean resolution.
            degraded = resize(degraded, h / degraded.shape[0], size=(h, w))
        return jaccard(clean_tags[j], tagger.tag(degraded))

    pairs = [(i, j) for i in range(m) for j in range(n)]
    sims = amap_ordered(score, pairs, jobs)
    records = []
    for i in range(m):
        # fsum is exact, so the mean does not depend on image order.
        s = math.fsum(sims[i * n : (i + 1) * n]) / n
        records.append(SimilarityRecord(spec_ids[i], s, n))
    return SimilarityReport(records)


@attr.define
class SeverityClasses:
    class1: list[int]
    class2: list[int]
    class3: list[int]
    class4: list[int]

    def as_list(self) -> list[list[int]]:
        return [self.class1, self.class2, self.class3, self.class4]

    def class_of(self, spec_id: int) -> int:
        for k, members in enumerate(self.as_list(), start=1):
            if spec_id in members:
                return k
        raise KeyError(spec_id)

    def to_json(self) -> dict[str, list[int]]:
        return attr.asdict(self)

    @classmethod
    def from_json(cls, data: Mapping[str, list[int]]) -> SeverityClasses:
        return cls(**{k: list(v) for k, v in data.items()})


def classify_four(report: SimilarityReport) -> SeverityClasses:
    """
    Rank degradations by similarity, highest first (ties by ID), and split
    them into four contiguous classes of near-equal size, larger classes
    first.
    """
    if len(report) < 4:
        raise ParameterError(
            f"Need at least 4 degradations to classify, got {len(report)}"
        )
    ranked = sorted(report.records, key=lambda r: (-r.mean_similarity, r.spec_id))
    q, rem = divmod(len(ranked), 4)
    groups: list[list[int]] = []
    start = 0
    for k in range(4):
        size = q + (1 if k < rem else 0)
        groups.append([r.spec_id for r in ranked[start : start + size]])
        start += size
    return SeverityClasses(*groups)


@attr.define
class Selection:
    mild: frozenset[int]
    severe: frozenset[int]

    def to_json(self) -> dict[str, list[int]]:
        return {"mild": sorted(self.mild), "severe": sorted(self.severe)}

    @classmethod
    def from_json(cls, data: Mapping[str, list[int]]) -> Selection:
        return cls(mild=frozenset(data["mild"]), severe=frozenset(data["severe"]))


def select_by_threshold(report: SimilarityReport, tau1: float, tau2: float) -> Selection:
    if not tau1 > tau2:
        raise ParameterError(f"tau1 ({tau1}) must be greater than tau2 ({tau2})")
    mild = frozenset(r.spec_id for r in report.records if r.mean_similarity > tau1)
    severe = frozenset(r.spec_id for r in report.records if r.mean_similarity < tau2)
    log.info(
        "Selected %d mild (S > %g) and %d severe (S < %g) degradations of %d",
        len(mild),
        tau1,
        len(severe),
        tau2,
        len(report),
    )
    return Selection(mild=mild, severe=severe)


def class_summary(report: SimilarityReport, classes: SeverityClasses) -> list[float]:
    """Mean similarity of each severity class"""
    sims = report.by_id()
    return [
        math.fsum(sims[i] for i in members) / len(members) if members else math.nan
        for members in classes.as_list()
    ]


def compare_taggers(
    hr_images: Sequence[ImageTensor],
    degradations: Sequence[DegradationSpec],
    classes: SeverityClasses,
    taggers: Sequence[Tagger],
    jobs: Optional[int] = None,
) -> dict[str, list[float]]:
    """
    Per-class mean similarity for each tagger, with classes fixed in advance
    (normally from the reference tagger's report)
    """
    return {
        t.name: class_summary(
            severity_profile(hr_images, degradations, t, jobs=jobs), classes
        )
        for t in taggers
    }
