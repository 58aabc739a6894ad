import numpy as np
import pytest

from errors import DimensionMismatchError, FileFormatError, InvalidDimensionError, UnknownClassError
from problems import (InstanceDescriptor, derive_seed, evaluate, evaluate_batch, get_class,
                      instance_from_descriptor, make_instance, random_rotation, suite_list)

ALL_CLASSES = [fc.id for fc in suite_list(24)]


class TestSuite:
    def test_default_suite_has_twelve_classes(self):
        suite = suite_list()
        assert [fc.id for fc in suite] == list(range(1, 13))
        assert suite[0].name == 'Sphere'

    def test_full_suite(self):
        assert len(suite_list(24)) == 24
        assert len({fc.name for fc in suite_list(24)}) == 24

    @pytest.mark.parametrize('count', [0, 25])
    def test_suite_size_out_of_range(self, count):
        with pytest.raises(UnknownClassError):
            suite_list(count)

    def test_unknown_class_id(self):
        with pytest.raises(UnknownClassError):
            get_class(99)
        with pytest.raises(ValueError):
            get_class('nope')


class TestRotation:
    @pytest.mark.parametrize('dim', [1, 2, 5, 10, 40])
    def test_orthogonal(self, dim):
        r = random_rotation(dim, seed=7)
        assert np.max(np.abs(r.T @ r - np.eye(dim))) < 1e-10

    def test_seeded(self):
        np.testing.assert_array_equal(random_rotation(6, 3), random_rotation(6, 3))
        assert not np.array_equal(random_rotation(6, 3), random_rotation(6, 4))

    def test_rejects_zero_dimension(self):
        with pytest.raises(InvalidDimensionError):
            random_rotation(0, 1)


class TestInstances:
    def test_deterministic(self):
        a = make_instance(4, 5, 11)
        b = make_instance(4, 5, 11)
        np.testing.assert_array_equal(a.x_opt, b.x_opt)
        np.testing.assert_array_equal(a.rotation, b.rotation)
        assert a.f_opt == b.f_opt

    def test_seed_changes_instance(self):
        assert not np.array_equal(make_instance(4, 5, 11).x_opt, make_instance(4, 5, 12).x_opt)

    def test_arrays_are_read_only(self):
        inst = make_instance(2, 3, 1)
        with pytest.raises(ValueError):
            inst.x_opt[0] = 0.0

    def test_optimum_inside_inner_box(self):
        for seed in range(1, 20):
            inst = make_instance(5, 4, seed)
            assert np.all(np.abs(inst.x_opt) <= 4.0)
            assert -100.0 <= inst.f_opt <= 100.0

    def test_linear_slope_optimum_on_corner(self):
        inst = make_instance(11, 6, 3)
        np.testing.assert_array_equal(np.abs(inst.x_opt), np.full(6, 5.0))

    def test_separable_classes_skip_rotation(self):
        np.testing.assert_array_equal(make_instance(1, 4, 2).rotation, np.eye(4))
        assert not np.array_equal(make_instance(15, 4, 2).rotation, np.eye(4))

    def test_bad_dimension(self):
        with pytest.raises(InvalidDimensionError):
            make_instance(1, 0, 1)

    def test_descriptor_round_trip(self):
        descriptor = InstanceDescriptor(7, 10, 42)
        assert InstanceDescriptor.from_line(descriptor.to_line()) == descriptor
        inst = instance_from_descriptor(descriptor)
        assert inst.descriptor == descriptor

    @pytest.mark.parametrize('line', ['1 2', '1 2 x', ''])
    def test_malformed_descriptor(self, line):
        with pytest.raises(FileFormatError):
            InstanceDescriptor.from_line(line)


class TestEvaluation:
    @pytest.mark.parametrize('class_id', ALL_CLASSES)
    @pytest.mark.parametrize('dim', [2, 10])
    def test_optimum_value(self, class_id, dim):
        inst = make_instance(class_id, dim, 1)
        fitness = evaluate(inst, inst.x_opt)
        assert abs(fitness.value - inst.f_opt) <= 1e-9 * max(1.0, abs(inst.f_opt))
        assert fitness.error <= 1e-9

    @pytest.mark.parametrize('class_id', ALL_CLASSES)
    def test_no_point_beats_optimum(self, class_id):
        inst = make_instance(class_id, 3, 2)
        x = np.random.default_rng(class_id).uniform(-5.0, 5.0, size=(200, 3))
        values = evaluate_batch(inst, x)
        assert np.all(np.isfinite(values))
        assert np.all(values >= inst.f_opt - 1e-9)

    @pytest.mark.parametrize('class_id', [1, 4, 12, 19, 23])
    def test_batch_matches_single(self, class_id):
        inst = make_instance(class_id, 10, 5)
        x = np.random.default_rng(0).uniform(-5.0, 5.0, size=(7, 10))
        batch = evaluate_batch(inst, x)
        single = np.array([evaluate(inst, row).value for row in x])
        np.testing.assert_allclose(batch, single, rtol=1e-13, atol=1e-12)

    def test_error_is_non_negative(self):
        inst = make_instance(3, 2, 1)
        assert evaluate(inst, [1.0, -2.0]).error > 0.0

    def test_dimension_mismatch(self):
        inst = make_instance(1, 3, 1)
        with pytest.raises(DimensionMismatchError):
            evaluate(inst, np.zeros(4))
        with pytest.raises(DimensionMismatchError):
            evaluate_batch(inst, np.zeros((2, 2)))


def test_derive_seed_is_stable():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 2, 4)
    assert 0 <= derive_seed(9, 9) < 2 ** 63
