import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from data import (Dataset, DatasetSpec, DatasetTag, EmpiricalDist, ecdf, generate, quantile, read_csv,
                  wasserstein1, wasserstein1_sorted, write_csv)
from error_handling import DataFormatError, PreconditionError, UnknownArmError, ValidationError
from scm_core import Arm

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)
samples = st.lists(finite, min_size=1, max_size=40)


@pytest.fixture
def four():
    return EmpiricalDist.from_sample([3.0, 1.0, 4.0, 2.0])


class TestDataset:
    def test_counts_and_records(self):
        dataset = Dataset.from_arms([1.0, 2.0, 3.0], [0.5])
        assert (dataset.n0, dataset.n1, len(dataset)) == (3, 1, 4)
        assert dataset.records[-1] == (Arm.TREATED, 0.5)
        np.testing.assert_array_equal(dataset.outcomes_for(0), [1.0, 2.0, 3.0])

    def test_rejects_unknown_arm(self):
        with pytest.raises(UnknownArmError):
            Dataset(arms=np.array([0, 2]), outcomes=np.array([0.0, 1.0]))

    def test_rejects_nonfinite_outcome(self):
        with pytest.raises(ValidationError):
            Dataset(arms=np.array([0, 1]), outcomes=np.array([0.0, np.inf]))

    def test_rejects_mismatched_lengths(self):
        with pytest.raises(ValidationError):
            Dataset(arms=np.array([0, 1, 1]), outcomes=np.array([0.0, 1.0]))


class TestEmpiricalDist:
    def test_support_estimate(self, four):
        assert four.support_estimate == (1.0, 4.0)
        assert four.n == 4

    def test_values_are_read_only(self, four):
        with pytest.raises(ValueError):
            four.sorted_values[0] = 10.0

    def test_rejects_empty_and_unsorted(self):
        with pytest.raises(PreconditionError):
            EmpiricalDist.from_sample([])
        with pytest.raises(ValidationError):
            EmpiricalDist(np.array([2.0, 1.0]))


class TestEcdfQuantile:
    def test_ecdf_examples(self, four):
        assert ecdf(four, 0.5) == 0.0
        assert ecdf(four, 2.5) == 0.5
        assert ecdf(four, 4.0) == 1.0
        assert ecdf(four, 1e9) == 1.0

    def test_ecdf_is_right_continuous(self, four):
        assert ecdf(four, 2.0) == 0.5
        assert ecdf(four, np.nextafter(2.0, 0.0)) == 0.25

    def test_quantile_examples(self, four):
        assert quantile(four, 0.5) == 2.0
        assert quantile(four, 0.0) == 1.0
        assert quantile(four, 1.0) == 4.0
        np.testing.assert_array_equal(quantile(four, [0.25, 0.26, 0.75]), [1.0, 2.0, 3.0])

    def test_quantile_rejects_bad_level(self, four):
        with pytest.raises(PreconditionError):
            quantile(four, 1.5)

    @given(samples)
    def test_roundtrip_inequality(self, values):
        d = EmpiricalDist.from_sample(values)
        for y in d.sorted_values:
            assert quantile(d, ecdf(d, y)) <= y

    @given(samples, st.lists(finite, min_size=2, max_size=20))
    def test_ecdf_nondecreasing(self, values, points):
        d = EmpiricalDist.from_sample(values)
        points = np.sort(points)
        assert np.all(np.diff(ecdf(d, points)) >= 0)


class TestWasserstein:
    def test_identical(self):
        d = EmpiricalDist.from_sample([0.3, -1.0, 2.0])
        assert wasserstein1(d, d) == 0.0

    def test_shift(self):
        values = np.random.default_rng(0).normal(size=50)
        assert wasserstein1(EmpiricalDist.from_sample(values), EmpiricalDist.from_sample(values + 0.75)) == \
            pytest.approx(0.75, abs=1e-12)

    def test_two_point_example(self):
        assert wasserstein1(EmpiricalDist.from_sample([0, 1]), EmpiricalDist.from_sample([0, 2])) == 0.5

    def test_unequal_sizes_match_scipy(self, rng):
        x = rng.normal(size=37)
        y = rng.normal(loc=0.3, size=91)
        expected = stats.wasserstein_distance(x, y)
        assert wasserstein1(EmpiricalDist.from_sample(x), EmpiricalDist.from_sample(y)) == pytest.approx(expected, rel=1e-10)

    @given(samples, samples, samples)
    def test_metric_properties(self, a, b, c):
        da, db, dc = (EmpiricalDist.from_sample(v) for v in (a, b, c))
        assert wasserstein1(da, db) == pytest.approx(wasserstein1(db, da), abs=1e-9)
        assert wasserstein1(da, dc) <= wasserstein1(da, db) + wasserstein1(db, dc) + 1e-9

    def test_sorted_helper_on_arrays(self):
        assert wasserstein1_sorted(np.array([0.0, 1.0]), np.array([0.0, 2.0])) == 0.5


class TestGenerate:
    def test_dataset1_is_standard_normal(self):
        dataset = generate(DatasetSpec(DatasetTag.DATASET1, 100_000, seed=0))
        for a in Arm:
            y = dataset.outcomes_for(a)
            assert abs(y.mean()) <= 0.02
            assert abs(y.var() - 1.0) <= 0.05

    def test_dataset2_mixture_means(self):
        dataset = generate(DatasetSpec('2', 100_000, seed=1))
        assert dataset.outcomes_for(0).mean() == pytest.approx(0.10, abs=0.03)
        assert dataset.outcomes_for(1).mean() == pytest.approx(0.05, abs=0.03)

    def test_reproducible(self):
        request = DatasetSpec(DatasetTag.DATASET2, 200, seed=5)
        first, second = generate(request), generate(request)
        np.testing.assert_array_equal(first.outcomes, second.outcomes)
        np.testing.assert_array_equal(first.arms, second.arms)

    def test_validation(self):
        with pytest.raises(ValidationError):
            DatasetSpec(DatasetTag.DATASET1, 1)
        with pytest.raises(ValidationError):
            DatasetSpec('3', 10)


class TestCsv:
    def test_read_example(self, tmp_path):
        path = tmp_path / 'd.csv'
        path.write_text('a,y\n0,1.5\n1,-0.2\n')
        dataset = read_csv(path)
        assert len(dataset) == 2
        assert dataset.records == [(Arm.UNTREATED, 1.5), (Arm.TREATED, -0.2)]

    def test_unknown_arm(self, tmp_path):
        path = tmp_path / 'd.csv'
        path.write_text('a,y\n2,0.0\n')
        with pytest.raises(UnknownArmError):
            read_csv(path)

    @pytest.mark.parametrize('body,line', [('a,y\n0,1.0\n1,abc\n', 3), ('a,y\n0,1.0,2\n', 2), ('a,y\nx,1.0\n', 2),
                                           ('a,y\n0,nan\n', 2)])
    def test_malformed_lines_report_line_number(self, tmp_path, body, line):
        path = tmp_path / 'd.csv'
        path.write_text(body)
        with pytest.raises(DataFormatError) as info:
            read_csv(path)
        assert info.value.line_number == line

    def test_bad_header(self, tmp_path):
        path = tmp_path / 'd.csv'
        path.write_text('arm,outcome\n0,1\n')
        with pytest.raises(DataFormatError):
            read_csv(path)

    def test_roundtrip(self, tmp_path):
        dataset = generate(DatasetSpec(DatasetTag.DATASET1, 100, seed=2))
        path = tmp_path / 'd.csv'
        write_csv(dataset, path)
        again = read_csv(path)
        np.testing.assert_array_equal(again.arms, dataset.arms)
        np.testing.assert_array_equal(again.outcomes, dataset.outcomes)
