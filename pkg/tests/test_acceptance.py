"""Acceptance gate: one test per required behavior, each naming its bound.

Run with ``pytest tests/test_acceptance.py -v`` to get one pass/fail line
per criterion.  The end-to-end fixture (200 synthetic points, 30% blended,
4 classes, 50 neighbors, seed 42) is built once per module via the CLI and
shared; its first-build statistics are frozen in
``tests/data/e2e_snapshot.json`` and compared as regression snapshots.
"""

import json
import math
import time
from collections import Counter
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from robometer import cli, detectors, featstats, nn, robustness, transforms
from robometer.transforms import TransformSpec

from test_featstats import brute_min_u, brute_pearson, brute_spearman
from test_nn import finite_difference_grads

DATA = Path(__file__).parent / "data"


@contextmanager
def budget(seconds):
    start = time.monotonic()
    yield
    elapsed = time.monotonic() - start
    assert elapsed < seconds, f"runtime bound exceeded: {elapsed:.1f}s >= {seconds}s"


def run_cli(argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    started = time.monotonic()
    steps = [
        ["gen-data", "--out", root / "data", "--points", 200, "--classes", 4,
         "--blended-fraction", 0.3, "--image-side", 24, "--seed", 42],
        ["train-model", "--out", root / "model", "--data", root / "data/manifest.json",
         "--seed", 42, "--epochs", 40],
        ["profile", "--out", root / "prof", "--data", root / "data/manifest.json",
         "--model", root / "model/model.bin", "--seed", 42, "--neighbors", 50],
        ["analyze", "--out", root / "ana", "--data", root / "data/manifest.json",
         "--model", root / "model/model.bin", "--profile", root / "prof",
         "--cutoff", 0.75],
        ["calibrate-b", "--out", root / "calib", "--profile", root / "prof",
         "--cutoff", 0.75, "--neighbors-b", 50],
        ["train-w", "--out", root / "tw", "--data", root / "data/manifest.json",
         "--model", root / "model/model.bin", "--profile", root / "prof",
         "--cutoff", 0.75, "--seed", 42],
        ["eval", "--out", root / "ev", "--data", root / "data/manifest.json",
         "--model", root / "model/model.bin", "--profile", root / "prof",
         "--threshold", root / "calib/bthreshold.json",
         "--wmodel", root / "tw/wmodel.bin", "--cutoff", 0.75, "--seed", 1042],
    ]
    for step in steps:
        assert run_cli(step) == 0, step
    return {"root": root, "build_seconds": time.monotonic() - started}


def test_criterion_01_simpson_diversity_worked_examples():
    with budget(1):
        assert abs(robustness.simpson_lambda([0, 0, 1, 1, 1], 2) - 0.52) <= 1e-9
        assert abs(robustness.simpson_lambda([0, 0, 1, 1, 2], 3) - 0.36) <= 1e-9


def test_criterion_02_neighbor_accuracy_worked_examples():
    with budget(1):
        assert abs(robustness.neighbor_accuracy([True] * 5 + [False]) - 0.8333) <= 1e-4
        assert abs(robustness.neighbor_accuracy([True] + [False] * 5) - 0.1667) <= 1e-4


def test_criterion_03_gradient_check_against_finite_differences():
    with budget(30):
        cases = [
            ([4, 3], "softmax"), ([4, 6, 3], "softmax"),
            ([4, 5, 4, 3], "softmax"), ([4, 6, 5, 4, 3], "softmax"),
            ([4, 3, 1], "linear"), ([4, 6, 5, 4, 1], "linear"),
        ]
        rng = np.random.default_rng(7)
        for sizes, head in cases:
            net = nn.init(sizes, seed=int(rng.integers(1e6)), head=head,
                          dtype=np.float64)
            x = rng.random((6, sizes[0]))
            y = (rng.integers(0, sizes[-1], 6) if head == "softmax"
                 else rng.random(6))
            analytic = nn.backward(net, x, y)
            numeric = finite_difference_grads(net, x, y)
            n_layers = len(net.weights)
            for i, (dw, db) in enumerate(analytic):
                for got, want in [(dw, numeric[i]), (db, numeric[n_layers + i])]:
                    denom = np.maximum(np.abs(want), 1e-8)
                    assert np.max(np.abs(got - want) / denom) < 1e-4


def _random_profile(rng, n):
    points = [
        robustness.PointProfile(
            point_index=i, label=int(rng.integers(0, 4)),
            original_correct=bool(rng.integers(0, 2)),
            neighbor_accuracy=float(rng.integers(0, 21) / 20.0),
            diversity_lambda=float(rng.integers(5, 21) / 20.0),
            m=20, transforms_digest="0" * 12,
        )
        for i in range(n)
    ]
    return robustness.RobustnessProfile(
        model_name="r", dataset_id="d", task="classification",
        m=20, seed=0, recipe="spatial", epsilon=None, points=points,
    )


def test_criterion_04_b_calibration_recall_is_one():
    with budget(5):
        rng = np.random.default_rng(11)
        for trial in range(5):
            profile = _random_profile(rng, 1000)
            for cutoff in (0.5, 0.75):
                truth = set(robustness.label_points(profile, cutoff).weak_indices())
                if not truth:
                    continue
                bt = detectors.calibrate_b(profile, cutoff)
                detected = {
                    p.point_index for p in profile.points
                    if not p.diversity_lambda > bt.lambda_threshold
                }
                report = detectors.evaluate(detected, truth, 1000)
                assert report.recall == 1.0


def _oracle_p_value(a, b):
    # independent tie-corrected normal approximation, from the textbook formula
    n1, n2 = len(a), len(b)
    u_a = sum(1.0 if x > y else 0.5 if x == y else 0.0 for x in a for y in b)
    u = min(u_a, n1 * n2 - u_a)
    n = n1 + n2
    ties = Counter(list(a) + list(b)).values()
    tie_term = sum(t ** 3 - t for t in ties)
    var = (n1 * n2 / 12.0) * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return 1.0
    z = max(abs(u - n1 * n2 / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return min(math.erfc(z / math.sqrt(2.0)), 1.0)


def _oracle_cohens_d(a, b):
    n1, n2 = len(a), len(b)
    m1 = sum(a) / n1
    m2 = sum(b) / n2
    v1 = sum((x - m1) ** 2 for x in a) / (n1 - 1)
    v2 = sum((x - m2) ** 2 for x in b) / (n2 - 1)
    pooled = math.sqrt(((n1 - 1) * v1 + (n2 - 1) * v2) / (n1 + n2 - 2))
    return (m1 - m2) / pooled


def test_criterion_05_statistics_match_brute_force_oracles():
    with budget(5):
        rng = np.random.default_rng(13)
        checked = 0
        while checked < 24:
            n1 = int(rng.integers(3, 12))
            n2 = int(rng.integers(3, 12))
            a = (rng.integers(0, 8, n1) / 2.0).tolist()
            b = (rng.integers(0, 8, n2) / 2.0).tolist()
            if len(set(a)) < 2 or len(set(b)) < 2:
                continue
            u, p = featstats.mann_whitney_u(a, b)
            assert abs(u - brute_min_u(a, b)) <= 1e-9
            assert abs(p - _oracle_p_value(a, b)) <= 1e-6
            assert abs(featstats.cohens_d(a, b) - _oracle_cohens_d(a, b)) <= 1e-9
            paired = min(n1, n2)
            x, y = a[:paired], b[:paired]
            if paired >= 3 and len(set(x)) > 1 and len(set(y)) > 1:
                assert abs(featstats.spearman(x, y) - brute_spearman(x, y)) <= 1e-9
                assert abs(featstats.pearson(x, y) - brute_pearson(x, y)) <= 1e-9
            checked += 1


def _reference_warp(image, matrix):
    # plain-loop inverse mapping; integer-exact on right-angle fixtures
    h, w, c = image.shape
    a, bb, tx = matrix[0]
    cc, d, ty = matrix[1]
    det = a * d - bb * cc
    inv = ((d / det, -bb / det, (bb * ty - d * tx) / det),
           (-cc / det, a / det, (cc * tx - a * ty) / det))
    out = np.zeros_like(image)
    for row in range(h):
        for col in range(w):
            sx = inv[0][0] * col + inv[0][1] * row + inv[0][2]
            sy = inv[1][0] * col + inv[1][1] * row + inv[1][2]
            x0, y0 = math.floor(sx), math.floor(sy)
            fx, fy = sx - x0, sy - y0
            for ch in range(c):
                total = 0.0
                for dy_i, dx_i, weight in [(0, 0, (1 - fx) * (1 - fy)),
                                           (0, 1, fx * (1 - fy)),
                                           (1, 0, (1 - fx) * fy),
                                           (1, 1, fx * fy)]:
                    yy, xx = y0 + dy_i, x0 + dx_i
                    if 0 <= yy < h and 0 <= xx < w:
                        total += weight * image[yy, xx, ch]
                out[row, col, ch] = min(max(total, 0.0), 1.0)
    return out


def test_criterion_06_transform_exactness():
    with budget(1):
        rng = np.random.default_rng(17)
        image = rng.random((5, 4, 3), dtype=np.float32)
        identity = TransformSpec(kind="spatial", rotation_deg=0.0, dx_px=0.0, dy_px=0.0)
        assert np.array_equal(transforms.apply_transform(image, identity), image)

        hot = np.zeros((3, 3, 1), dtype=np.float32)
        hot[0, 1, 0] = 1.0

        m90 = transforms.rotation_translation_matrix(90.0, 0.0, 0.0, 3, 3)
        got = transforms.warp_bilinear(hot, m90)
        expected = np.zeros((3, 3, 1), dtype=np.float32)
        expected[1, 0, 0] = 1.0  # (row 0, col 1) lands at (row 1, col 0)
        assert np.array_equal(got, expected)
        assert np.array_equal(got, _reference_warp(hot, m90))

        m_shift = transforms.rotation_translation_matrix(0.0, 1.0, 0.0, 3, 3)
        got = transforms.warp_bilinear(hot, m_shift)
        expected = np.zeros((3, 3, 1), dtype=np.float32)
        expected[0, 2, 0] = 1.0  # unit x-translation moves the hot pixel right
        assert np.array_equal(got, expected)
        assert np.array_equal(got, _reference_warp(hot, m_shift))

        m_up = transforms.rotation_translation_matrix(0.0, 0.0, 1.0, 3, 3)
        got = transforms.warp_bilinear(hot, m_up)
        expected = np.zeros((3, 3, 1), dtype=np.float32)
        expected[1, 1, 0] = 1.0  # unit y-translation moves it down a row
        assert np.array_equal(got, expected)
        assert np.array_equal(got, _reference_warp(hot, m_up))


def test_criterion_07_outputs_identical_across_thread_counts(e2e, tmp_path):
    root = e2e["root"]
    with budget(120):
        outputs = {}
        for threads in (1, 8):
            prof_dir = tmp_path / f"prof_t{threads}"
            assert run_cli(["profile", "--out", prof_dir,
                            "--data", root / "data/manifest.json",
                            "--model", root / "model/model.bin",
                            "--seed", 42, "--neighbors", 50,
                            "--threads", threads]) == 0
            ev_dir = tmp_path / f"ev_t{threads}"
            assert run_cli(["eval", "--out", ev_dir,
                            "--data", root / "data/manifest.json",
                            "--model", root / "model/model.bin",
                            "--profile", root / "prof",
                            "--threshold", root / "calib/bthreshold.json",
                            "--wmodel", root / "tw/wmodel.bin",
                            "--cutoff", 0.75, "--seed", 1042,
                            "--threads", threads]) == 0
            outputs[threads] = {
                "profile.jsonl": (prof_dir / "profile.jsonl").read_bytes(),
                "profile_meta.json": (prof_dir / "profile_meta.json").read_bytes(),
                "accuracy_histogram.csv": (prof_dir / "accuracy_histogram.csv").read_bytes(),
                "eval_report.json": (ev_dir / "eval_report.json").read_bytes(),
            }
        for name in outputs[1]:
            assert outputs[1][name] == outputs[8][name], name
        # and the fixture's own single-thread run agrees
        assert outputs[1]["profile.jsonl"] == (root / "prof/profile.jsonl").read_bytes()


def test_criterion_08_direction_of_effect_and_frozen_snapshot(e2e):
    with budget(max(1.0, 600 - e2e["build_seconds"])):
        root = e2e["root"]
        ana = json.loads((root / "ana/analysis.json").read_text())
        ev = json.loads((root / "ev/eval_report.json").read_text())
        by_name = {r["detector"]: r for r in ev["detectors"]}

        # (a) weak points sit closer to rival class centers than strong points
        assert ana["r_w"] > ana["r_s"]
        # (b) diversity tracks accuracy once saturated points are excluded
        assert ana["spearman_acc_lambda"] > 0.5
        # (c) both detectors clear the matched random baseline by a wide margin
        assert (by_name["diversity-threshold"]["f1"]
                >= by_name["random-matched-to-diversity"]["f1"] + 0.2)
        assert (by_name["feature-classifier"]["f1"]
                >= by_name["random-matched-to-feature"]["f1"] + 0.2)

        snapshot = json.loads((DATA / "e2e_snapshot.json").read_text())
        assert ana["n_weak"] == snapshot["n_weak"]
        assert ana["n_strong"] == snapshot["n_strong"]
        for key in ("r_w", "r_s", "cohens_d", "mwu_p", "spearman_acc_lambda"):
            assert ana[key] == pytest.approx(snapshot[key], rel=1e-6), key
        bt = json.loads((root / "calib/bthreshold.json").read_text())
        assert bt["lambda_threshold"] == pytest.approx(
            snapshot["lambda_threshold"], rel=1e-6)
        for name, want in snapshot["detectors"].items():
            got = by_name[name]
            for metric in ("precision", "recall", "f1"):
                assert got[metric] == pytest.approx(want[metric], rel=1e-6), (
                    name, metric)


def test_criterion_09_weak_set_monotone_in_cutoff(e2e):
    with budget(5):
        rng = np.random.default_rng(19)
        profiles = [_random_profile(rng, 200) for _ in range(100)]
        root = e2e["root"]
        profiles.append(robustness.load_profile(
            root / "prof/profile.jsonl", root / "prof/profile_meta.json"))
        for profile in profiles:
            weak_low = set(robustness.label_points(profile, 0.5).weak_indices())
            weak_high = set(robustness.label_points(profile, 0.75).weak_indices())
            assert weak_low <= weak_high


def test_criterion_10_evaluation_formulas():
    with budget(1):
        report = detectors.evaluate({0, 1, 2, 9}, {0, 1, 2, 3, 4}, 10)
        assert abs(report.precision - 0.75) <= 1e-9
        assert abs(report.recall - 0.6) <= 1e-9
        assert abs(report.f1 - 2 / 3) <= 1e-9
