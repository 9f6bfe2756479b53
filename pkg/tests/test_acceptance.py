"""Acceptance suite: one test per shipped guarantee.

Each test's docstring first line names the guarantee; the terminal summary
prints a [PASS]/[FAIL] line per test (see conftest). These tests exercise
the package end to end and deliberately re-derive expectations with the
independent oracles in ``oracles.py`` instead of reusing library code.
"""

import time

import numpy as np
import pytest

from fundusgrade.backends import load_manifest, final_class_set
from fundusgrade.dme import decision_table, dme_label_fn
from fundusgrade.dr import MERGED_SEVERE, dr_label_fn, grade_dr, grade_dr_batch
from fundusgrade.dme import grade_dme_batch
from fundusgrade.ensemble import EnsembleSpec, ensemble_vote, prune
from fundusgrade.evaluation import evaluate, load_labels, task_dataset
from fundusgrade.fixtures import (
    ModelProfile,
    make_default_fixtures,
    make_dme_fixture,
    make_dr_fixture,
)
from fundusgrade.golden import run_golden_checks
from fundusgrade.preprocess import (
    CROP_SIZE,
    DEFAULT_CHANNEL_STATS,
    minmax_normalize,
    standardize,
    ten_crop,
)

from conftest import make_stub, make_table, random_raw
from oracles import prune_oracle, scalar_minmax, scalar_standardize, two_level_vote

pytestmark = pytest.mark.acceptance


def test_reference_arithmetic():
    """reference-arithmetic: all four frozen results verify within 0.1pp in under a second

    The embedded confusion matrices must reproduce their headline accuracy
    figures from raw counts alone, instantly.
    """
    start = time.perf_counter()
    checks = run_golden_checks(tolerance_pp=0.1)
    elapsed = time.perf_counter() - start
    assert len(checks) == 4
    for check in checks:
        assert check.ok, check.line()
        assert abs(check.delta_pp) <= 0.1
    assert elapsed < 1.0, f"golden checks took {elapsed:.3f}s"


def test_edema_decision_table():
    """edema-decision-table: all four detector combinations map to the documented case and grade"""
    assert decision_table(True, False) == (1, 0)   # clean image
    assert decision_table(False, True) == (2, 2)   # exudates, advanced
    assert decision_table(False, False) == (3, 1)  # exudates, not advanced
    assert decision_table(True, True) == (4, 2)    # contradiction, severe wins
    outputs = {decision_table(a, b) for a in (True, False) for b in (True, False)}
    assert len(outputs) == 4


def test_ten_crop_geometry():
    """ten-crop-geometry: 100 random images give ten in-bounds 224x224 crops with exact mirror pairs, byte-stable

    Crop order is the four corners then center, first of the image and then
    of its horizontal mirror; each mirrored crop must equal the horizontal
    flip of its geometric partner, and repeated runs must agree bitwise.
    """
    rng = np.random.default_rng(20240301)
    offset = 256 - CROP_SIZE  # 32
    expected_tags = [
        ("tl", 0, 0), ("tr", 0, offset), ("bl", offset, 0),
        ("br", offset, offset), ("center", offset // 2, offset // 2),
    ]
    mirror_pairs = [(5, 1), (6, 0), (7, 3), (8, 2), (9, 4)]
    for i in range(100):
        raw = random_raw(rng, 256, 256, source=f"img{i}.png")
        crops = ten_crop(raw)
        again = ten_crop(raw)
        assert len(crops.crops) == 10
        for j, (crop, tag) in enumerate(zip(crops.crops, crops.provenance)):
            assert crop.values.shape == (3, CROP_SIZE, CROP_SIZE)
            assert crop.crop == j
            corner, top, left = expected_tags[j % 5]
            assert (tag.corner, tag.top, tag.left) == (corner, top, left)
            assert tag.flipped == (j >= 5)
            assert 0 <= tag.top <= offset and 0 <= tag.left <= offset
            assert crop.values.tobytes() == again.crops[j].values.tobytes()
        for flipped_idx, plain_idx in mirror_pairs:
            assert np.array_equal(
                crops.crops[flipped_idx].values,
                crops.crops[plain_idx].values[:, :, ::-1],
            )


def test_normalization_oracle():
    """normalization-oracle: min-max and standardization match a scalar reference within 1e-6

    Fifty random small images are pushed through both the vectorized
    pipeline and a plain-Python reimplementation; a constant image must
    normalize to all zeros instead of dividing by zero.
    """
    rng = np.random.default_rng(20240302)
    mean, std = DEFAULT_CHANNEL_STATS.mean, DEFAULT_CHANNEL_STATS.std
    for i in range(50):
        raw = random_raw(rng, 16, 16, source=f"n{i}.png")
        nested = raw.pixels.tolist()

        scaled = minmax_normalize(raw)
        assert np.max(np.abs(scaled.values - np.array(scalar_minmax(nested)))) <= 1e-6

        standardized = standardize(scaled, DEFAULT_CHANNEL_STATS)
        oracle = scalar_standardize(scalar_minmax(nested), mean, std)
        assert np.max(np.abs(standardized.values - np.array(oracle))) <= 1e-6

    constant = random_raw(rng, 16, 16)
    constant.pixels[:] = 77
    assert np.all(minmax_normalize(constant).values == 0.0)


def test_two_level_voting_oracle():
    """two-level-voting-oracle: 1000 random vote configurations match exhaustive counting and ignore model order

    Each configuration plants per-crop labels for one to five models, runs
    the real crop-then-model voting over a shared ten-crop set, and checks
    the winner against an oracle that counts every class by brute force.
    """
    rng = np.random.default_rng(20240303)
    raw = random_raw(rng, 256, 256, source="vote.png")
    crops = ten_crop(raw)
    cache: dict = {}  # one crop set for every configuration, so sharing is valid
    k = 4
    for _ in range(1000):
        n_models = int(rng.integers(1, 6))
        planted = rng.integers(0, k, size=(n_models, 10))
        models = tuple(
            make_table(f"m{i}", "dr-primary", {"vote.png": [int(v) for v in planted[i]]})
            for i in range(n_models)
        )
        spec = EnsembleSpec(members=models, task="dr-primary").with_all_retained()
        label = ensemble_vote(spec, crops, cache)
        assert label == two_level_vote(planted.tolist(), k)

        if n_models > 1:
            perm = rng.permutation(n_models)
            shuffled = EnsembleSpec(
                members=tuple(models[j] for j in perm), task="dr-primary"
            ).with_all_retained()
            assert ensemble_vote(shuffled, crops, cache) == label


def test_benchmark_pruning(tmp_path):
    """benchmark-pruning: true positives 40/39/37 at factor 0.95 retain exactly the top two, and retention shrinks monotonically

    The threshold is ceil(0.95 * 40) = 38 under exact decimal arithmetic,
    so the 37-correct model is dropped while the 39-correct one survives.
    """
    fixture = make_dme_fixture(
        tmp_path,
        m1=(
            ModelProfile(model_id="a"),                      # 40 correct
            ModelProfile(model_id="b", accuracy="0.975"),    # 39 correct
            ModelProfile(model_id="c", accuracy="0.925"),    # 37 correct
        ),
        m2=(ModelProfile(model_id="echo"),),
        grade_counts=(20, 10, 10),
    )
    dataset = task_dataset(
        load_labels(fixture.labels_csv, final_class_set("dme"), image_dir=fixture.image_dir),
        "dme-m1",
    )
    spec = EnsembleSpec.from_manifest(load_manifest(fixture.manifest), "dme-m1")

    report = prune(spec, dataset, threshold_factor="0.95", tencrop=False)
    assert report.per_model_tp == {"a": 40, "b": 39, "c": 37}
    assert report.benchmark_id == "a"
    assert report.threshold == 38
    assert report.retained == ("a", "b")

    previous = None
    for factor in ("0", "0.5", "0.925", "0.95", "1"):
        sweep = prune(spec, dataset, threshold_factor=factor, tencrop=False)
        bench, threshold, retained = prune_oracle({"a": 40, "b": 39, "c": 37}, factor)
        assert sweep.benchmark_id == bench
        assert sweep.threshold == threshold
        assert list(sweep.retained) == retained
        if previous is not None:
            assert set(sweep.retained) <= set(previous)
        previous = sweep.retained
    assert previous == ("a",)  # factor 1 keeps only the benchmark


def test_severe_routing():
    """severe-routing: over 500 random cascades the expert runs exactly when the primary says merged-severe

    When the primary stays below the merged class the expert is never
    consulted (a trap model that fails on any lookup proves it), and when
    routing happens the final grade is the merged base plus the expert's
    binary verdict.
    """
    rng = np.random.default_rng(20240304)
    raw = random_raw(rng, 64, 64, source="route.png")
    # a table model with no entries and no default raises if consulted
    trap = EnsembleSpec(
        members=(make_table("trap", "dr-expert", {}),), task="dr-expert"
    ).with_all_retained()
    routed_seen = unrouted_seen = 0
    for _ in range(500):
        p = int(rng.integers(0, 4))
        e = int(rng.integers(0, 2))
        primary = EnsembleSpec(
            members=(make_stub("p", "dr-primary", label=p),), task="dr-primary"
        ).with_all_retained()
        if p == MERGED_SEVERE:
            expert = EnsembleSpec(
                members=(make_stub("e", "dr-expert", label=e),), task="dr-expert"
            ).with_all_retained()
            decision = grade_dr(raw, primary, expert, tencrop=False)
            assert decision.routed_to_expert
            assert decision.grade_index == MERGED_SEVERE + e
            assert decision.expert_votes is not None
            routed_seen += 1
        else:
            decision = grade_dr(raw, primary, trap, tencrop=False)
            assert not decision.routed_to_expert
            assert decision.grade_index == p
            assert decision.expert_votes is None
            unrouted_seen += 1
    assert routed_seen > 0 and unrouted_seen > 0


def test_deterministic_reports(tmp_path):
    """deterministic-reports: batch CSVs are byte-identical across reruns and worker counts"""
    dr = make_dr_fixture(tmp_path / "dr", grade_counts=(1, 1, 1, 1, 1))
    dme = make_dme_fixture(tmp_path / "dme", grade_counts=(2, 1, 2))
    dr_manifest = load_manifest(dr.manifest)
    dme_manifest = load_manifest(dme.manifest)

    dr_reports = []
    for i, workers in enumerate((1, 1, 3)):
        out = tmp_path / f"dr{i}.csv"
        grade_dr_batch(
            dr.image_dir,
            EnsembleSpec.from_manifest(dr_manifest, "dr-primary"),
            EnsembleSpec.from_manifest(dr_manifest, "dr-expert"),
            out,
            workers=workers,
        )
        dr_reports.append(out.read_bytes())
    assert dr_reports[0] == dr_reports[1] == dr_reports[2]

    dme_reports = []
    for i, workers in enumerate((1, 1, 3)):
        out = tmp_path / f"dme{i}.csv"
        grade_dme_batch(
            dme.image_dir,
            EnsembleSpec.from_manifest(dme_manifest, "dme-m1"),
            EnsembleSpec.from_manifest(dme_manifest, "dme-m2"),
            out,
            workers=workers,
        )
        dme_reports.append(out.read_bytes())
    assert dme_reports[0] == dme_reports[1] == dme_reports[2]


def test_truth_echo(tmp_path):
    """truth-echo: bundled fixtures grade to 100% with exactly diagonal confusion matrices

    The default synthetic datasets (56 retinopathy images over five grades,
    44 edema images over three) must come back with every image on the
    diagonal when the planted models echo the truth.
    """
    fixtures = make_default_fixtures(tmp_path)

    dr = fixtures["dr"]
    manifest = load_manifest(dr.manifest)
    dataset = load_labels(dr.labels_csv, final_class_set("dr"), image_dir=dr.image_dir)
    assert len(dataset) == 56
    result = evaluate(
        dr_label_fn(
            EnsembleSpec.from_manifest(manifest, "dr-primary"),
            EnsembleSpec.from_manifest(manifest, "dr-expert"),
        ),
        dataset,
    )
    assert result.skipped == ()
    assert result.matrix.accuracy == 1.0
    assert np.array_equal(result.matrix.counts, np.diag([15, 12, 14, 9, 6]))

    dme = fixtures["dme"]
    manifest = load_manifest(dme.manifest)
    dataset = load_labels(dme.labels_csv, final_class_set("dme"), image_dir=dme.image_dir)
    assert len(dataset) == 44
    result = evaluate(
        dme_label_fn(
            EnsembleSpec.from_manifest(manifest, "dme-m1"),
            EnsembleSpec.from_manifest(manifest, "dme-m2"),
        ),
        dataset,
    )
    assert result.skipped == ()
    assert result.matrix.accuracy == 1.0
    assert np.array_equal(result.matrix.counts, np.diag([19, 5, 20]))
