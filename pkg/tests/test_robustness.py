import numpy as np
import pytest

from robometer import nn, robustness
from robometer._rng import Stream
from robometer.model_iface import BuiltinAdapter
from robometer.transforms import TransformSpec, apply_transform


class TestGenerateNeighbors:
    def test_identity_spec_reproduces_original(self):
        img = np.random.default_rng(0).random((8, 8, 1)).astype(np.float32)
        spec = TransformSpec(kind="spatial", rotation_deg=0.0, dx_px=0.0, dy_px=0.0)
        assert np.array_equal(apply_transform(img, spec), img)

    def test_spatial_recipe_counts_and_kinds(self):
        img = np.zeros((10, 10, 1), np.float32)
        pairs = robustness.generate_neighbors(img, 7, Stream(3), "spatial")
        assert len(pairs) == 7
        assert all(spec.kind == "spatial" for spec, _ in pairs)

    def test_rain_fog_split_even(self):
        img = np.zeros((10, 10, 1), np.float32)
        pairs = robustness.generate_neighbors(img, 10, Stream(4), "rain_fog_mix")
        kinds = [spec.kind for spec, _ in pairs]
        assert kinds.count("rain") == 5
        assert kinds.count("fog") == 5

    def test_rain_fog_split_odd_rounds_rain_up(self):
        img = np.zeros((10, 10, 1), np.float32)
        pairs = robustness.generate_neighbors(img, 7, Stream(5), "rain_fog_mix")
        kinds = [spec.kind for spec, _ in pairs]
        assert kinds.count("rain") == 4
        assert kinds.count("fog") == 3

    def test_weather_intensities_in_band(self):
        img = np.zeros((10, 10, 1), np.float32)
        for spec, _ in robustness.generate_neighbors(img, 40, Stream(6), "rain_fog_mix"):
            value = spec.rain_density if spec.kind == "rain" else spec.fog_intensity
            assert 0.2 <= value <= 0.8

    def test_same_stream_bitwise_identical(self):
        img = np.random.default_rng(1).random((12, 12, 3)).astype(np.float32)
        for recipe in robustness.RECIPES:
            a = robustness.generate_neighbors(img, 6, Stream(9), recipe)
            b = robustness.generate_neighbors(img, 6, Stream(9), recipe)
            for (sa, ia), (sb, ib) in zip(a, b):
                assert sa == sb
                assert np.array_equal(ia, ib)

    def test_argument_validation(self):
        img = np.zeros((4, 4, 1), np.float32)
        with pytest.raises(ValueError):
            robustness.generate_neighbors(img, 0, Stream(0))
        with pytest.raises(ValueError):
            robustness.generate_neighbors(img, 3, Stream(0), "blur")


class TestCorrectness:
    def test_one_hot_at_label(self):
        assert robustness.classification_correct(np.array([0, 0, 1.0]), 2)

    def test_uniform_tie_goes_to_lowest_index(self):
        outputs = np.array([0.25, 0.25, 0.25, 0.25])
        assert robustness.classification_correct(outputs, 0)
        assert not robustness.classification_correct(outputs, 1)

    def test_random_table_matches_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            outputs = rng.random(5)
            label = int(rng.integers(0, 5))
            expected = int(np.argmax(outputs)) == label
            assert robustness.classification_correct(outputs, label) == expected

    def test_regression_equal_always_correct(self):
        assert robustness.regression_correct(0.42, 0.42, 1e-9)

    def test_regression_boundary_closed(self):
        assert robustness.regression_correct(0.6, 0.5, 0.1)

    def test_regression_hand_table(self):
        cases = [
            (0.50, 0.50, True),
            (0.55, 0.50, True),
            (0.60, 0.50, True),   # exactly ε
            (0.6001, 0.50, False),
            (0.70, 0.50, False),
        ]
        for neighbor, original, expected in cases:
            assert robustness.regression_correct(neighbor, original, 0.1) is expected

    def test_regression_needs_positive_epsilon(self):
        with pytest.raises(ValueError):
            robustness.regression_correct(0.1, 0.1, 0.0)


class TestNeighborAccuracy:
    def test_paper_worked_examples(self):
        five_of_six = [True, True, True, True, True, False]
        assert robustness.neighbor_accuracy(five_of_six) == pytest.approx(0.8333, abs=1e-4)
        one_of_six = [True, False, False, False, False, False]
        assert robustness.neighbor_accuracy(one_of_six) == pytest.approx(0.1667, abs=1e-4)

    def test_all_correct(self):
        assert robustness.neighbor_accuracy([True] * 11) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            robustness.neighbor_accuracy([])

    def test_values_on_grid(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            m = int(rng.integers(1, 20))
            flags = rng.random(1 + m) < 0.5
            acc = robustness.neighbor_accuracy(list(flags))
            assert acc in {k / (1 + m) for k in range(m + 2)}


class TestSimpsonLambda:
    def test_worked_two_class_example(self):
        assert robustness.simpson_lambda([0, 0, 1, 1, 1], 3) == pytest.approx(0.52, abs=1e-9)

    def test_worked_three_class_example(self):
        assert robustness.simpson_lambda([0, 0, 1, 1, 2], 3) == pytest.approx(0.36, abs=1e-9)

    def test_unanimous_gives_one(self):
        assert robustness.simpson_lambda([2] * 9, 4) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            robustness.simpson_lambda([], 3)

    def test_out_of_range_class(self):
        with pytest.raises(ValueError):
            robustness.simpson_lambda([0, 3], 3)

    def test_bounds_and_unanimity_property(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            k = int(rng.integers(2, 6))
            n = int(rng.integers(1, 30))
            classes = rng.integers(0, k, size=n)
            lam = robustness.simpson_lambda(classes, k)
            assert 1.0 / k - 1e-12 <= lam <= 1.0 + 1e-12
            assert (lam == 1.0) == (len(set(classes.tolist())) == 1)


def fake_profile(accuracies, lambdas=None):
    points = [
        robustness.PointProfile(
            point_index=i,
            label=0,
            original_correct=acc == 1.0,
            neighbor_accuracy=acc,
            diversity_lambda=None if lambdas is None else lambdas[i],
            m=4,
            transforms_digest="0" * 12,
        )
        for i, acc in enumerate(accuracies)
    ]
    return robustness.RobustnessProfile(
        model_name="fake", dataset_id="d", task="classification",
        m=4, seed=0, recipe="spatial", epsilon=None, points=points,
    )


class TestLabelPoints:
    def test_paper_weak_example(self):
        labeling = robustness.label_points(fake_profile([0.49]), 0.75)
        assert labeling.weak_flags == [True]

    def test_exact_cutoff_is_strong(self):
        labeling = robustness.label_points(fake_profile([0.75]), 0.75)
        assert labeling.weak_flags == [False]

    def test_monotone_in_cutoff(self):
        rng = np.random.default_rng(10)
        accs = (rng.integers(0, 6, size=200) / 5.0).tolist()
        profile = fake_profile(accs)
        weak_half = set(robustness.label_points(profile, 0.5).weak_indices())
        weak_three_quarters = set(robustness.label_points(profile, 0.75).weak_indices())
        assert weak_half <= weak_three_quarters

    def test_cutoff_range_checked(self):
        with pytest.raises(ValueError):
            robustness.label_points(fake_profile([0.5]), 0.0)
        with pytest.raises(ValueError):
            robustness.label_points(fake_profile([0.5]), 1.5)


def memorizing_setup(n=12, k=3, seed=0):
    """Model that reads its class straight from the first k pixels."""
    rng = np.random.default_rng(seed)
    images = rng.random((n, 2, 2, 3)).astype(np.float32)
    labels = images.reshape(n, -1)[:, :k].argmax(axis=1).astype(np.uint32)
    net = nn.init([12, k], seed=0)
    net.weights[0][...] = 0
    for c in range(k):
        net.weights[0][c, c] = 50.0  # sharp logit on pixel c
    adapter = BuiltinAdapter(net, name="memorizer", input_dims=(2, 2, 3))
    return adapter, images, labels


class TestProfileDataset:
    def test_identity_transforms_on_memorizing_model(self, monkeypatch):
        adapter, images, labels = memorizing_setup()
        identity = TransformSpec(kind="spatial", rotation_deg=0.0, dx_px=0.0, dy_px=0.0)
        monkeypatch.setattr(robustness.transforms, "sample_spatial",
                            lambda stream, w, h: identity)
        profile = robustness.profile_dataset(adapter, images, labels, m=1, seed=5)
        for p in profile.points:
            assert p.original_correct
            assert p.neighbor_accuracy == 1.0
            assert p.diversity_lambda == 1.0

    def test_thread_count_does_not_change_report(self, tmp_path):
        adapter, images, labels = memorizing_setup(n=10)
        kwargs = dict(m=4, seed=11, recipe="spatial", dataset_id="tiny")
        seq = robustness.profile_dataset(adapter, images, labels, threads=1, **kwargs)
        par = robustness.profile_dataset(adapter, images, labels, threads=4, **kwargs)
        robustness.save_profile(seq, tmp_path / "a.jsonl")
        robustness.save_profile(par, tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_same_seed_reproducible(self):
        adapter, images, labels = memorizing_setup(n=8)
        a = robustness.profile_dataset(adapter, images, labels, m=3, seed=2)
        b = robustness.profile_dataset(adapter, images, labels, m=3, seed=2)
        assert [p.neighbor_accuracy for p in a.points] == [p.neighbor_accuracy for p in b.points]
        assert [p.transforms_digest for p in a.points] == [p.transforms_digest for p in b.points]

    def test_different_seeds_differ(self):
        adapter, images, labels = memorizing_setup(n=8)
        a = robustness.profile_dataset(adapter, images, labels, m=3, seed=2)
        b = robustness.profile_dataset(adapter, images, labels, m=3, seed=3)
        assert [p.transforms_digest for p in a.points] != [p.transforms_digest for p in b.points]

    def test_regression_profile_omits_lambda(self):
        net = nn.init([4, 6, 1], seed=1, head="linear")
        adapter = BuiltinAdapter(net, input_dims=(2, 2, 1))
        images = np.random.default_rng(2).random((6, 2, 2, 1)).astype(np.float32)
        targets = np.zeros(6, dtype=np.float32)
        profile = robustness.profile_dataset(
            adapter, images, targets, m=4, seed=1, recipe="rain_fog_mix", epsilon=0.05
        )
        for p in profile.points:
            assert p.original_correct is True   # reference is the model's own output
            assert p.diversity_lambda is None
            assert len(p.neighbor_predictions) == 5

    def test_label_count_mismatch(self):
        adapter, images, labels = memorizing_setup(n=5)
        with pytest.raises(ValueError):
            robustness.profile_dataset(adapter, images, labels[:-1], m=1)

    def test_label_range_checked(self):
        adapter, images, labels = memorizing_setup(n=5)
        bad = labels.copy()
        bad[0] = 7
        with pytest.raises(ValueError):
            robustness.profile_dataset(adapter, images, bad, m=1)


class TestExtractFeatures:
    def test_matches_direct_forward(self):
        net = nn.init([4, 6, 3], seed=3)
        adapter = BuiltinAdapter(net, input_dims=(2, 2, 1))
        images = np.random.default_rng(3).random((9, 2, 2, 1)).astype(np.float32)
        _, expected = nn.forward(net, images.reshape(9, -1))
        # same batch shape → bit-exact
        assert np.array_equal(robustness.extract_features(adapter, images), expected)
        # chunked path → BLAS may round the tail chunk differently
        chunked = robustness.extract_features(adapter, images, chunk=4)
        np.testing.assert_allclose(chunked, expected, atol=1e-6)

    def test_empty_input(self):
        net = nn.init([4, 6, 3], seed=3)
        adapter = BuiltinAdapter(net, input_dims=(2, 2, 1))
        feats = robustness.extract_features(adapter, np.zeros((0, 2, 2, 1), np.float32))
        assert feats.shape == (0, 6)


class TestReports:
    def make_profile(self):
        adapter, images, labels = memorizing_setup(n=7)
        return robustness.profile_dataset(
            adapter, images, labels, m=3, seed=4, dataset_id="seven"
        )

    def test_round_trip(self, tmp_path):
        profile = self.make_profile()
        robustness.save_profile(
            profile, tmp_path / "p.jsonl", meta_path=tmp_path / "p.meta.json",
            csv_path=tmp_path / "p.csv",
        )
        loaded = robustness.load_profile(tmp_path / "p.jsonl", tmp_path / "p.meta.json")
        assert loaded.model_name == profile.model_name
        assert loaded.m == profile.m
        assert loaded.seed == profile.seed
        for a, b in zip(profile.points, loaded.points):
            assert a.point_index == b.point_index
            assert a.neighbor_accuracy == b.neighbor_accuracy
            assert a.diversity_lambda == b.diversity_lambda
            assert a.transforms_digest == b.transforms_digest

    def test_saved_record_fields(self, tmp_path):
        import json
        profile = self.make_profile()
        robustness.save_profile(profile, tmp_path / "p.jsonl")
        first = json.loads((tmp_path / "p.jsonl").read_text().splitlines()[0])
        assert tuple(first.keys()) == robustness.REPORT_FIELDS

    def test_csv_mirror_header(self, tmp_path):
        profile = self.make_profile()
        robustness.save_profile(profile, tmp_path / "p.jsonl", csv_path=tmp_path / "p.csv")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == ",".join(robustness.REPORT_FIELDS)
        assert len(lines) == 1 + len(profile.points)

    def test_resave_is_byte_stable(self, tmp_path):
        profile = self.make_profile()
        robustness.save_profile(profile, tmp_path / "a.jsonl", meta_path=tmp_path / "a.meta.json")
        loaded = robustness.load_profile(tmp_path / "a.jsonl", tmp_path / "a.meta.json")
        robustness.save_profile(loaded, tmp_path / "b.jsonl", meta_path=tmp_path / "b.meta.json")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert (tmp_path / "a.meta.json").read_bytes() == (tmp_path / "b.meta.json").read_bytes()
