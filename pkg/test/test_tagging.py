from __future__ import annotations
from pathlib import Path
import numpy as np
import pytest
from dacesr.errors import DegradationError, ParameterError
from dacesr.fixtures import generate_corpus
from dacesr.imgproc import (
    Blur,
    DegradationSpec,
    ImageTensor,
    Resize,
    apply_chain,
    sample_degradations,
    sweep_specs,
)
from dacesr.tagging import (
    Selection,
    SeverityClasses,
    SimilarityRecord,
    SimilarityReport,
    SurrogateTagger,
    TagSet,
    class_summary,
    classify_four,
    compare_taggers,
    jaccard,
    select_by_threshold,
    severity_profile,
    surrogate_tag,
    tagset,
)


def edge_level(tags: TagSet) -> int:
    (level,) = [int(t.split("_")[1]) for t in tags if t.startswith("edge_")]
    return level


def report_of(sims: list[float]) -> SimilarityReport:
    return SimilarityReport([SimilarityRecord(i, s, 1) for i, s in enumerate(sims)])


@pytest.mark.parametrize(
    "a,b,expected",
    [
        pytest.param({"x", "y"}, {"x", "y"}, 1.0, id="equal"),
        pytest.param({"x"}, {"y"}, 0.0, id="disjoint"),
        pytest.param({"x", "y", "z"}, {"y", "z", "w"}, 0.5, id="half"),
        pytest.param(set(), set(), 1.0, id="both-empty"),
        pytest.param({"x"}, set(), 0.0, id="one-empty"),
    ],
)
def test_jaccard(a: set[str], b: set[str], expected: float) -> None:
    assert jaccard(a, b) == expected
    assert jaccard(b, a) == expected


def test_jaccard_properties() -> None:
    rng = np.random.default_rng(0)
    vocab = [f"t{i}" for i in range(12)]
    for _ in range(200):
        a = {t for t in vocab if rng.random() < 0.4}
        b = {t for t in vocab if rng.random() < 0.4}
        assert jaccard(a, b) == jaccard(b, a)
        assert 0.0 <= jaccard(a, b) <= 1.0
        assert jaccard(a, a) == 1.0


def test_tagset_normalizes() -> None:
    assert tagset(["Hue_3", " edge_1 ", "", "hue_3"]) == frozenset({"hue_3", "edge_1"})


def test_surrogate_tag_deterministic(corpus: list[ImageTensor]) -> None:
    for img in corpus[:5]:
        assert surrogate_tag(img) == surrogate_tag(img.copy())


def test_surrogate_tag_constant_gray() -> None:
    tags = surrogate_tag(np.full((48, 48, 3), 0.5))
    assert "edge_0" in tags
    assert [t for t in tags if t.startswith("lum_")] == ["lum_3"]
    assert [t for t in tags if t.startswith("hue_")] == ["hue_gray"]
    assert not any(t.startswith("orient_") for t in tags)
    cells = [t for t in tags if t.startswith("cell_")]
    assert len(cells) == 16
    assert all(t.endswith("_hue_gray") for t in cells)


@pytest.mark.parametrize(
    "value,level",
    [
        pytest.param(0.0, 0, id="black"),
        pytest.param(1 / 3, 2, id="third"),
        pytest.param(0.5, 3, id="mid"),
        pytest.param(1.0, 5, id="white"),
    ],
)
def test_gray_luminance_level_on_edges(value: float, level: int) -> None:
    tags = surrogate_tag(np.full((32, 32, 3), value))
    assert [t for t in tags if t.startswith("lum_")] == [f"lum_{level}"]
    assert "var_0" in tags


def test_surrogate_tag_tokens_are_lowercase(corpus: list[ImageTensor]) -> None:
    for img in corpus[:5]:
        assert all(t == t.lower() for t in surrogate_tag(img))


@pytest.mark.parametrize(
    "shape",
    [
        pytest.param((16, 64, 3), id="short"),
        pytest.param((64, 31, 3), id="narrow"),
    ],
)
def test_surrogate_tag_too_small(shape: tuple[int, int, int]) -> None:
    with pytest.raises(ParameterError):
        surrogate_tag(np.zeros(shape))


def test_heavy_blur_removes_edges(corpus: list[ImageTensor]) -> None:
    for img in corpus:
        clean = surrogate_tag(img)
        blurred = surrogate_tag(apply_chain(img, DegradationSpec([Blur(3.0)])))
        assert edge_level(blurred) <= edge_level(clean)


def test_identity_spec_scores_one(corpus: list[ImageTensor]) -> None:
    report = severity_profile(corpus[:4], [DegradationSpec()], SurrogateTagger())
    assert report.records == [SimilarityRecord(0, 1.0, 4)]


def test_single_pair_is_direct_jaccard(corpus: list[ImageTensor]) -> None:
    spec = DegradationSpec([Blur(1.0)], seed=1)
    report = severity_profile(corpus[:1], [spec], SurrogateTagger())
    expected = jaccard(surrogate_tag(corpus[0]), surrogate_tag(apply_chain(corpus[0], spec)))
    assert report.records[0].mean_similarity == expected


def test_downscaled_images_are_tagged_at_clean_size(corpus: list[ImageTensor]) -> None:
    # The sampled chains shrink 64×64 images to 16×16, below the tagger minimum.
    specs = sample_degradations(3, seed=5)
    report = severity_profile(corpus[:2], specs, SurrogateTagger())
    assert all(0.0 <= r.mean_similarity <= 1.0 for r in report.records)


def test_profile_invariant_under_image_order(corpus: list[ImageTensor]) -> None:
    specs = sweep_specs("blur", [0.5, 2.0], seed=0) + sweep_specs("noise", [15], seed=0)
    fwd = severity_profile(corpus[:8], specs, SurrogateTagger())
    rev = severity_profile(corpus[:8][::-1], specs, SurrogateTagger())
    for a, b in zip(fwd.records, rev.records):
        assert a.mean_similarity == pytest.approx(b.mean_similarity, abs=1e-12)


def test_profile_parallel_matches_sequential(corpus: list[ImageTensor]) -> None:
    specs = sweep_specs("noise", [5, 20], seed=0) + sweep_specs("jpeg", [40], seed=0)
    seq = severity_profile(corpus[:6], specs, SurrogateTagger(), jobs=1)
    par = severity_profile(corpus[:6], specs, SurrogateTagger(), jobs=4)
    assert seq == par


def test_profile_wraps_degradation_failure(corpus: list[ImageTensor]) -> None:
    bad = DegradationSpec([Resize(0.001)])
    with pytest.raises(DegradationError) as excinfo:
        severity_profile(corpus[:2], [DegradationSpec(), bad], SurrogateTagger(), spec_ids=[10, 11])
    assert excinfo.value.spec_id == 11
    assert excinfo.value.image_index == 0


def test_profile_needs_inputs(corpus: list[ImageTensor]) -> None:
    with pytest.raises(ParameterError):
        severity_profile([], [DegradationSpec()], SurrogateTagger())
    with pytest.raises(ParameterError):
        severity_profile(corpus[:1], [], SurrogateTagger())


def test_classify_four_even_split() -> None:
    report = report_of([0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1][::-1])
    classes = classify_four(report)
    # spec 7 has S=0.8, spec 6 has S=0.7, ...
    assert classes == SeverityClasses([7, 6], [5, 4], [3, 2], [1, 0])


def test_classify_four_ties_by_id() -> None:
    classes = classify_four(report_of([0.5] * 10))
    assert classes == SeverityClasses([0, 1, 2], [3, 4, 5], [6, 7], [8, 9])


def test_classify_four_shift_invariant() -> None:
    rng = np.random.default_rng(1)
    sims = [float(x) for x in rng.uniform(0, 0.5, size=37)]
    a = classify_four(report_of(sims))
    b = classify_four(report_of([s + 0.25 for s in sims]))
    assert a == b
    members = sorted(i for c in a.as_list() for i in c)
    assert members == list(range(37))
    assert sorted(len(c) for c in a.as_list()) == [9, 9, 9, 10]


def test_classify_four_too_few() -> None:
    with pytest.raises(ParameterError):
        classify_four(report_of([0.1, 0.2, 0.3]))


def test_class_of() -> None:
    classes = SeverityClasses([0], [1], [2], [3, 4])
    assert classes.class_of(4) == 4
    with pytest.raises(KeyError):
        classes.class_of(5)
    assert SeverityClasses.from_json(classes.to_json()) == classes


@pytest.mark.parametrize(
    "sims,tau1,tau2,mild,severe",
    [
        pytest.param([0.9, 0.5, 0.1], 0.7, 0.3, {0}, {2}, id="basic"),
        pytest.param([0.0, 1.0, 0.5], 1.0, 0.0, set(), set(), id="strict"),
        pytest.param([0.71, 0.711, 0.297, 0.296], 0.710, 0.297, {1}, {3}, id="defaults"),
    ],
)
def test_select_by_threshold(
    sims: list[float], tau1: float, tau2: float, mild: set[int], severe: set[int]
) -> None:
    assert select_by_threshold(report_of(sims), tau1, tau2) == Selection(
        frozenset(mild), frozenset(severe)
    )


@pytest.mark.parametrize("tau1,tau2", [(0.3, 0.3), (0.2, 0.7)])
def test_select_by_threshold_invalid(tau1: float, tau2: float) -> None:
    with pytest.raises(ParameterError):
        select_by_threshold(report_of([0.5]), tau1, tau2)


def test_report_files(tmp_path: Path) -> None:
    report = report_of([0.25, 1.0, 0.1 + 0.2])
    report.write_jsonl(tmp_path / "r.jsonl")
    assert SimilarityReport.read_jsonl(tmp_path / "r.jsonl") == report
    report.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "spec_id,mean_similarity,n_images"
    assert lines[3] == "2,0.30000000000000004,1"


def test_class_summary_and_compare(corpus: list[ImageTensor]) -> None:
    specs = sweep_specs("blur", [0.3, 1.0, 2.0, 3.0], seed=0)
    report = severity_profile(corpus[:4], specs, SurrogateTagger())
    classes = classify_four(report)
    summary = class_summary(report, classes)
    assert summary == sorted(summary, reverse=True)
    compared = compare_taggers(corpus[:4], specs, classes, [SurrogateTagger()])
    assert compared == {"surrogate": summary}


@pytest.mark.slow
def test_similarity_declines_with_severity() -> None:
    images = generate_corpus(64, 96, seed=0)
    tagger = SurrogateTagger()
    blur = severity_profile(images, sweep_specs("blur", [0.5, 1.5, 2.5], seed=0), tagger)
    noise = severity_profile(images, sweep_specs("noise", [5, 10, 20, 30], seed=0), tagger)
    for report in (blur, noise):
        sims = [r.mean_similarity for r in report.records]
        assert all(a >= b for a, b in zip(sims, sims[1:]))
        assert sims[0] > sims[-1]


def test_thousand_records_split_evenly() -> None:
    rng = np.random.default_rng(7)
    report = report_of([float(x) for x in rng.uniform(size=1000)])
    classes = classify_four(report)
    assert [len(c) for c in classes.as_list()] == [250, 250, 250, 250]
    worst_of_mild = min(report.by_id()[i] for i in classes.class1)
    assert all(report.by_id()[i] <= worst_of_mild for i in classes.class2)
