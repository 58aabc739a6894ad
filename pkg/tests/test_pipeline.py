import os
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from convnet import ArchitectureConfig, TrainConfig, build_network
from database import RunStore
from errors import (BudgetError, ConfigError, EmptySplitError, FileFormatError, MissingInputError,
                    MissingMethodError, ShapeError)
from optimizers import AlgorithmId, solve
from pipeline import (RANK_METHODS, SPLITS, DatasetManifest, decide_label, evaluate_accuracy, evaluate_split,
                      generate_algorithm_dataset, generate_class_dataset, instance_descriptors,
                      label_by_best_algorithm, label_manifest, load_split, rank_table, run_benchmark,
                      select_and_solve, select_repetition, stratified_split, train_classifier)
from problems import make_instance
from sampling import make_sample_matrix, save_sample_matrix


class FixedSelector:
    """Always answers with the same probability vector."""

    def __init__(self, probabilities):
        self.probabilities = np.asarray(probabilities, dtype=float)

    def predict_proba(self, image):
        return self.probabilities


class ConstantPredictor:
    def __init__(self, label):
        self.label = label

    def predict(self, images):
        return np.full(len(images), self.label)


class PerfectPredictor:
    def __init__(self, labels):
        self.labels = labels

    def predict(self, images):
        return np.asarray(self.labels)


class LabelLookupSelector:
    """Answers each landscape image with the label stored for it in a manifest."""

    def __init__(self, manifest):
        self.labels = {}
        for tag in SPLITS:
            if manifest.split(tag):
                data = load_split(manifest, tag)
                for image, label in zip(data.images, data.labels):
                    self.labels[self._key(image)] = int(label)

    @staticmethod
    def _key(image):
        return np.asarray(getattr(image, 'pixels', image), dtype='<f4').tobytes()

    def predict_proba(self, image):
        probabilities = np.zeros(len(AlgorithmId))
        probabilities[self.labels[self._key(image)]] = 1.0
        return probabilities


@pytest.fixture
def class_dataset(tmp_path):
    return generate_class_dataset([1, 3], dim=2, instances_per_class=10, n_samples=100, seed=0,
                                  out_dir=str(tmp_path / 'classes'))


@pytest.fixture
def as_algorithm_dataset(class_dataset):
    return replace(class_dataset, label_kind='best-algorithm', label_names=[a.name for a in AlgorithmId])


@pytest.fixture(scope='module')
def labeled_suite(tmp_path_factory):
    out = str(tmp_path_factory.mktemp('labeled_suite'))
    return generate_algorithm_dataset([1, 2, 3, 4, 7, 15], dim=2, instances_per_class=10, n_samples=100,
                                      seed=0, out_dir=out, budget=5000, runs=3)


class TestDecideLabel:
    def test_lowest_mean_wins(self):
        assert decide_label([1e-10, 0.5, 0.3]) is AlgorithmId.ABC
        assert decide_label([0.4, 0.2, 0.3]) is AlgorithmId.CMAES

    def test_two_solved_is_undetermined(self):
        assert decide_label([1e-10, 1e-9, 0.3]) is None
        assert decide_label([0.0, 0.0, 0.0]) is None

    def test_exact_tie_is_undetermined(self):
        assert decide_label([0.4, 0.2, 0.2]) is None

    def test_epsilon_is_respected(self):
        assert decide_label([1e-5, 2e-5, 0.3], epsilon=1e-4) is None
        assert decide_label([1e-5, 2e-5, 0.3]) is AlgorithmId.ABC

    def test_needs_three_errors(self):
        with pytest.raises(ShapeError):
            decide_label([0.1, 0.2])


class TestSplits:
    def test_counts_per_class(self):
        tags = stratified_split([1] * 50 + [2] * 50 + [3] * 50, seed=0)
        assert tags.count('train') == 105
        assert tags.count('val') == 15
        assert tags.count('test') == 30
        assert tags[:50].count('train') == 35

    def test_seeded(self):
        groups = [1] * 20 + [2] * 20
        assert stratified_split(groups, 4) == stratified_split(groups, 4)
        assert stratified_split(groups, 4) != stratified_split(groups, 5)

    def test_duplicate_classes(self):
        with pytest.raises(ConfigError):
            instance_descriptors([1, 1], 2, 3)

    def test_instance_seeds_start_at_one(self):
        descriptors = instance_descriptors([4], 2, 3)
        assert [d.seed for d in descriptors] == [1, 2, 3]


class TestClassDataset:
    def test_manifest_round_trip(self, class_dataset, tmp_path):
        assert class_dataset.counts() == {'train': 14, 'val': 2, 'test': 4}
        loaded = DatasetManifest.read(str(tmp_path / 'classes' / 'manifest.tsv'))
        assert loaded.entries == class_dataset.entries
        assert loaded.label_names == ['Sphere', 'Rastrigin']
        assert loaded.sample_matrix().digest() == class_dataset.sample_hash
        assert {e.label for e in loaded.entries} == {0, 1}

    def test_load_split(self, class_dataset):
        data = load_split(class_dataset, 'train')
        assert data.images.shape == (14, 10, 10)
        assert load_split(class_dataset, 'val', side=16).images.shape == (2, 16, 16)

    def test_unknown_split(self, class_dataset):
        with pytest.raises(ConfigError):
            class_dataset.split('holdout')

    def test_images_are_reproducible(self, class_dataset, tmp_path):
        again = generate_class_dataset([1, 3], dim=2, instances_per_class=10, n_samples=100, seed=0,
                                       out_dir=str(tmp_path / 'again'))
        for a, b in zip(class_dataset.entries, again.entries):
            assert a.split == b.split
            first = open(class_dataset.resolve(a.image_path), 'rb').read()
            second = open(again.resolve(b.image_path), 'rb').read()
            assert first == second

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingInputError):
            DatasetManifest.read(str(tmp_path / 'absent.tsv'))

    def test_label_out_of_range(self, class_dataset, tmp_path):
        path = tmp_path / 'classes' / 'manifest.tsv'
        lines = path.read_text().splitlines()
        fields = lines[-1].split('\t')
        fields[4] = '7'
        lines[-1] = '\t'.join(fields)
        path.write_text('\n'.join(lines) + '\n')
        with pytest.raises(FileFormatError):
            DatasetManifest.read(str(path))

    def test_tampered_samples(self, class_dataset):
        save_sample_matrix(make_sample_matrix(100, 2, mode='random', seed=1),
                           class_dataset.resolve(class_dataset.samples_path))
        with pytest.raises(FileFormatError):
            class_dataset.sample_matrix()


class TestLabeling:
    def test_label_row_uses_store(self, tmp_path):
        store = RunStore(str(tmp_path / 'runs.db'))
        inst = make_instance(3, 2, 1)
        row = label_by_best_algorithm(inst, budget=300, runs=2, seed=0, store=store)
        assert len(row.mean_errors) == 3
        assert store.count() == 6
        again = label_by_best_algorithm(inst, budget=300, runs=2, seed=0, store=store)
        assert again.mean_errors == row.mean_errors
        assert store.count() == 6

    def test_label_manifest(self, class_dataset, tmp_path):
        out = str(tmp_path / 'labeled')
        labeled, report = label_manifest(class_dataset, out, budget=300, runs=2, seed=0)
        assert labeled.label_kind == 'best-algorithm'
        assert labeled.label_names == ['ABC', 'CMAES', 'LSHADE']
        assert len(labeled.entries) + sum(report.eliminated_counts().values()) == 20
        winners = {r.descriptor: r.winner for r in report.rows}
        for e in labeled.entries:
            assert e.label == int(winners[e.descriptor])
        for name in ('manifest.tsv', 'label_report.csv', 'eliminated.csv'):
            assert os.path.exists(os.path.join(out, name))
        reread = DatasetManifest.read(os.path.join(out, 'manifest.tsv'))
        assert reread.entries == labeled.entries
        assert load_split(reread, 'train').images.shape[1:] == (10, 10)

    def test_everything_undetermined(self, class_dataset, tmp_path):
        with pytest.raises(EmptySplitError):
            label_manifest(class_dataset, str(tmp_path / 'labeled'), budget=300, runs=1, epsilon=1e300)

    def test_worker_count_does_not_change_labels(self):
        inst = make_instance(7, 2, 2)
        one = label_by_best_algorithm(inst, budget=300, runs=2, seed=3, workers=1)
        two = label_by_best_algorithm(inst, budget=300, runs=2, seed=3, workers=2)
        assert one.mean_errors == two.mean_errors


class TestAccuracy:
    def test_perfect_predictor(self):
        labels = [0, 1, 2, 1]
        table = evaluate_accuracy(PerfectPredictor(labels), np.zeros((4, 2, 2)), labels, ['a', 'b', 'c'])
        assert table.overall == 1.0
        assert table.per_class == [1.0, 1.0, 1.0]

    def test_constant_predictor(self):
        labels = [0, 0, 1, 2]
        table = evaluate_accuracy(ConstantPredictor(0), np.zeros((4, 2, 2)), labels, ['a', 'b', 'c'])
        assert table.correct == [2, 0, 0]
        assert table.totals == [2, 1, 1]
        assert table.overall == 0.5
        assert table.class_average == pytest.approx(1.0 / 3.0)
        assert 'Overall' in table.to_text()

    def test_empty_split(self):
        with pytest.raises(EmptySplitError):
            evaluate_accuracy(ConstantPredictor(0), np.zeros((0, 2, 2)), [], ['a', 'b'])

    def test_network_class_mismatch(self, class_dataset):
        net = build_network(ArchitectureConfig(variant='b', input_side=10, num_classes=3,
                                               groups=[(1, 4)], fc_sizes=[8]))
        with pytest.raises(ConfigError):
            evaluate_split(net, class_dataset)


class TestRepetitionSelection:
    def test_median_test_accuracy(self):
        val = [0.5, 0.9, 0.7, 0.6, 0.8]
        test = [0.60, 0.95, 0.70, 0.65, 0.80]
        assert select_repetition(val, test, 'median') == 2
        assert select_repetition(val, test, 'best-val') == 1

    def test_even_count_takes_lower_median(self):
        assert select_repetition([0.5] * 4, [0.1, 0.4, 0.3, 0.2]) == 3

    def test_ties_keep_order(self):
        assert select_repetition([0.5, 0.5, 0.5], [0.5, 0.5, 0.5]) == 1
        assert select_repetition([0.7, 0.7, 0.2], [0.0, 0.0, 0.0], 'best-val') == 0

    def test_without_test_split_uses_validation(self):
        nan = float('nan')
        assert select_repetition([0.2, 0.9, 0.5], [nan, nan, nan]) == 2

    def test_unknown_policy(self):
        with pytest.raises(ConfigError):
            select_repetition([0.5], [0.5], 'best-test')


class TestTraining:
    def test_repetitions(self, class_dataset):
        arch = ArchitectureConfig(variant='b', input_side=10, num_classes=2, groups=[(1, 4)], fc_sizes=[8])
        outcome = train_classifier(class_dataset, arch, TrainConfig(epochs=2, batch_size=7), repetitions=3)
        assert len(outcome.histories) == 3
        assert all(len(h) == 2 for h in outcome.histories)
        assert outcome.selection == 'median'
        chosen = outcome.selected_repetition
        assert outcome.test_accuracies[chosen] == sorted(outcome.test_accuracies)[1]
        assert chosen == select_repetition(outcome.val_accuracies, outcome.test_accuracies)
        assert 0.0 <= outcome.mean_test_accuracy <= 1.0
        table = evaluate_split(outcome.network, class_dataset, 'test')
        assert sum(table.totals) == 4
        assert table.overall == pytest.approx(outcome.test_accuracies[chosen])

    def test_best_validation_policy(self, class_dataset):
        arch = ArchitectureConfig(variant='b', input_side=10, num_classes=2, groups=[(1, 4)], fc_sizes=[8])
        outcome = train_classifier(class_dataset, arch, TrainConfig(epochs=1, batch_size=7), repetitions=2,
                                   selection='best-val')
        assert outcome.val_accuracies[outcome.selected_repetition] == max(outcome.val_accuracies)

    def test_unknown_selection(self, class_dataset):
        arch = ArchitectureConfig(variant='b', input_side=10, num_classes=2, groups=[(1, 4)], fc_sizes=[8])
        with pytest.raises(ConfigError):
            train_classifier(class_dataset, arch, TrainConfig(epochs=1), selection='last')

    def test_output_width_must_match_labels(self, class_dataset):
        arch = ArchitectureConfig(variant='b', input_side=10, num_classes=3, groups=[(1, 4)], fc_sizes=[8])
        with pytest.raises(ConfigError):
            train_classifier(class_dataset, arch, TrainConfig(epochs=1))


class TestPortfolio:
    def test_hardwired_selector_matches_plain_run(self):
        inst = make_instance(4, 2, 3)
        sm = make_sample_matrix(100, 2, mode='random', seed=0)
        result = select_and_solve(inst, 1000, FixedSelector([0.1, 0.8, 0.1]), sm, seed=7)
        plain = solve(AlgorithmId.CMAES, inst, 900, 7)
        assert result.chosen is AlgorithmId.CMAES
        assert result.best_error == plain.best_error
        assert result.sampling_evals == 100
        assert result.total_evals <= 1000

    def test_sampling_must_leave_budget(self):
        sm = make_sample_matrix(100, 2, mode='random', seed=0)
        with pytest.raises(BudgetError):
            select_and_solve(make_instance(1, 2, 1), 100, FixedSelector([0, 1, 0]), sm, seed=0)

    def test_selector_width(self):
        sm = make_sample_matrix(100, 2, mode='random', seed=0)
        with pytest.raises(ShapeError):
            select_and_solve(make_instance(1, 2, 1), 1000, FixedSelector([0.5, 0.5]), sm, seed=0)


class TestRanks:
    def test_all_tied(self):
        table = rank_table({m: {1: [0.0]} for m in RANK_METHODS})
        assert table.ranks.tolist() == [[1, 1, 1, 1]]

    def test_ordered(self):
        errors = dict(zip(RANK_METHODS, ([0.1], [0.2], [0.3], [0.4])))
        table = rank_table({m: {1: e} for m, e in errors.items()})
        assert table.ranks.tolist() == [[1, 2, 3, 4]]

    def test_ties_share_better_rank(self):
        errors = dict(zip(RANK_METHODS, ([0.3], [0.1], [0.1], [0.2])))
        table = rank_table({m: {5: e} for m, e in errors.items()})
        assert table.ranks.tolist() == [[4, 1, 1, 3]]

    def test_average_row(self):
        errors = {m: {1: [float(i)], 2: [float(3 - i)]} for i, m in enumerate(RANK_METHODS)}
        table = rank_table(errors)
        assert table.rank_rows()[-1] == ['Average', '2.500', '2.500', '2.500', '2.500']
        assert table.error_rows()[0][1] == '0.00E+00'

    def test_missing_method(self):
        errors = {m: {1: [0.1]} for m in RANK_METHODS[:-1]}
        with pytest.raises(MissingMethodError):
            rank_table(errors)

    def test_missing_class_for_method(self):
        errors = {m: {1: [0.1], 2: [0.2]} for m in RANK_METHODS}
        errors['ABC'] = {1: [0.1]}
        with pytest.raises(MissingMethodError):
            rank_table(errors)


class TestBenchmark:
    def test_fixed_selector(self, as_algorithm_dataset, tmp_path):
        report = run_benchmark(as_algorithm_dataset, FixedSelector([0.0, 1.0, 0.0]), total_budget=500, runs=1)
        assert report.table.methods == RANK_METHODS
        assert report.table.classes == [1, 3]
        assert np.all((report.table.ranks >= 1) & (report.table.ranks <= 4))
        assert len(report.portfolio) == 4
        assert all(p.chosen is AlgorithmId.CMAES and p.total_evals <= 500 for p in report.portfolio)
        assert len(report.single) == 12
        report.write(str(tmp_path))
        for name in ('ranks.csv', 'mean_errors.csv', 'portfolio_runs.csv', 'algorithm_runs.csv'):
            assert (tmp_path / name).exists()

    def test_same_seed_same_tables(self, as_algorithm_dataset, tmp_path):
        selector = FixedSelector([0.2, 0.3, 0.5])
        first = run_benchmark(as_algorithm_dataset, selector, total_budget=400, runs=2, seed=9)
        second = run_benchmark(as_algorithm_dataset, selector, total_budget=400, runs=2, seed=9)
        np.testing.assert_array_equal(first.table.mean_errors, second.table.mean_errors)
        np.testing.assert_array_equal(first.table.ranks, second.table.ranks)
        first.write(str(tmp_path / 'first'))
        second.write(str(tmp_path / 'second'))
        for name in ('ranks.csv', 'mean_errors.csv', 'portfolio_runs.csv', 'algorithm_runs.csv'):
            assert (tmp_path / 'first' / name).read_bytes() == (tmp_path / 'second' / name).read_bytes()

    def test_needs_algorithm_labels(self, class_dataset):
        with pytest.raises(ConfigError):
            run_benchmark(class_dataset, FixedSelector([0.0, 1.0, 0.0]), total_budget=500, runs=1)


@pytest.mark.slow
class TestScaledExperiments:
    def test_problem_class_accuracy(self, tmp_path):
        manifest = generate_class_dataset([1, 3, 4], dim=2, instances_per_class=100, n_samples=2025, seed=0,
                                          out_dir=str(tmp_path / 'classes'))
        arch = ArchitectureConfig(variant='b', num_classes=3, width_scale=Fraction(1, 8))
        outcome = train_classifier(manifest, arch, TrainConfig(epochs=30), repetitions=1)
        assert outcome.test_accuracies[0] >= 0.8

    def test_labels_and_elimination(self, labeled_suite):
        manifest, report = labeled_suite
        assert len({e.label for e in manifest.entries}) >= 2
        kept = {e.descriptor for e in manifest.entries}
        for row in report.rows:
            solved = sum(1 for m in row.mean_errors if m <= report.epsilon)
            if solved >= 2:
                assert row.descriptor not in kept
            if row.descriptor in kept:
                assert row.mean_errors[int(row.winner)] < min(m for k, m in enumerate(row.mean_errors)
                                                              if k != int(row.winner))

    def test_portfolio_rank_and_budget(self, labeled_suite):
        manifest, _ = labeled_suite
        report = run_benchmark(manifest, LabelLookupSelector(manifest), total_budget=5000, runs=2, seed=0)
        assert all(p.sampling_evals + p.solving_evals <= 5000 for p in report.portfolio)
        average = dict(zip(report.table.methods, report.table.average_ranks))
        assert average['portfolio'] <= max(average[a.name] for a in AlgorithmId)
