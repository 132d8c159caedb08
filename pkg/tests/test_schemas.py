import numpy as np
import pytest

from error_handling import UsageError, ValidationError
from schemas import FormatValidator, OutputValidator, document_kind, parse_grid, validate_or_raise


def bounds_doc(**changes):
    doc = {
        'query': {'a_prime': 0, 'y_prime': 0.5, 'a': 1},
        'lower': -0.2, 'upper': 0.8, 'q_upper': 0.8, 'q_lower': -0.2, 'crossed': False,
        'support_estimate': [-3.0, 3.0],
        'trajectories': {'q_upper': [0.1, None, 0.3]},
    }
    doc.update(changes)
    return doc


def oracle_doc(**changes):
    doc = {'scm': 'm1', 'a_prime': 0, 'a': 1, 'y_prime': 0.0, 'q': 1.0,
           'density_curve': {'y': [0.0, 1.0, 2.0], 'density': [0.5, 0.5, 0.5]}}
    doc.update(changes)
    return doc


class TestParseGrid:
    def test_examples(self):
        np.testing.assert_allclose(parse_grid('-1:1:5'), [-1.0, -0.5, 0.0, 0.5, 1.0])
        np.testing.assert_allclose(parse_grid(' 0 : 2.5e0 : 2 '), [0.0, 2.5])
        np.testing.assert_allclose(parse_grid('3:3:1'), [3.0])

    @pytest.mark.parametrize('text', ['1:0:5', '0:1', 'a:b:3', '0:1:0', '0:1:1000000', '0:1:2.5', '1e999:2e999:3'])
    def test_rejects(self, text):
        with pytest.raises(UsageError):
            parse_grid(text)


class TestFormatValidator:
    def test_numbers(self):
        assert FormatValidator.validate_number(1)
        assert FormatValidator.validate_number(-2.5)
        assert not FormatValidator.validate_number(True)
        assert not FormatValidator.validate_number(float('inf'))
        assert not FormatValidator.validate_number('1.0')

    def test_arms_and_intervals(self):
        assert FormatValidator.validate_arm(0) and FormatValidator.validate_arm(1)
        assert not FormatValidator.validate_arm(2) and not FormatValidator.validate_arm(False)
        assert FormatValidator.validate_interval([0.0, 1.0])
        assert not FormatValidator.validate_interval([1.0, 0.0])
        assert not FormatValidator.validate_interval([0.0, 1.0, 2.0])


class TestBoundsDocuments:
    def test_valid(self):
        assert OutputValidator.validate_bounds_data(bounds_doc()) == (True, [])

    def test_inverted_interval(self):
        ok, errors = OutputValidator.validate_bounds_data(bounds_doc(lower=1.0))
        assert not ok and "'lower' must not exceed 'upper'" in errors

    def test_query_arms_must_differ(self):
        ok, errors = OutputValidator.validate_bounds_data(bounds_doc(query={'a_prime': 1, 'y_prime': 0.0, 'a': 1}))
        assert not ok and "'a_prime' and 'a' must differ" in errors

    def test_bad_trajectory_and_flag(self):
        ok, errors = OutputValidator.validate_bounds_data(bounds_doc(crossed=0, trajectories={'q': ['x']}))
        assert not ok
        assert len(errors) == 2


class TestOracleDocuments:
    def test_single_query(self):
        assert OutputValidator.validate_oracle_data(oracle_doc())[0]

    def test_curve(self):
        doc = {'scm': 'm2', 'a_prime': 0, 'a': 1, 'curve': {'y_prime': [0.0, 1.0], 'q': [1.1, 1.5]}}
        assert OutputValidator.validate_oracle_data(doc)[0]
        doc['curve']['q'] = [1.1]
        assert not OutputValidator.validate_oracle_data(doc)[0]

    def test_negative_density(self):
        doc = oracle_doc(density_curve={'y': [0.0, 1.0], 'density': [0.1, -0.1]})
        ok, errors = OutputValidator.validate_oracle_data(doc)
        assert not ok and 'densities must be nonnegative' in errors


def test_validate_or_raise():
    doc = bounds_doc()
    assert validate_or_raise(OutputValidator.validate_bounds_data, doc, 'bounds') is doc
    with pytest.raises(UsageError):
        validate_or_raise(OutputValidator.validate_bounds_data, bounds_doc(lower=5.0), 'bounds')
    with pytest.raises(ValidationError):
        validate_or_raise(OutputValidator.validate_oracle_data, {}, 'oracle', ValidationError)


def test_document_kind():
    assert document_kind(bounds_doc()) == 'bounds'
    assert document_kind(oracle_doc()) == 'oracle'
    assert document_kind({'command': 'apid', 'outputs': {}}) == 'manifest'
    assert document_kind({}) is None
