"""Datasets, labeling, accuracy reporting and the sample-then-solve portfolio.

A dataset directory holds ``samples.npz`` (the shared sample matrix), one
``.lsim`` image per instance under ``images/`` and a ``manifest.tsv``
listing every instance with its label and split.
"""

import csv
import io
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import rankdata
from sklearn.metrics import confusion_matrix
from tabulate import tabulate

from convnet import (ArchitectureConfig, EpochRecord, ImageSet, Network, TrainConfig, accuracy,
                     build_network, train)
from database import RunStore, atomic_write_text
from errors import (BudgetError, ConfigError, EmptySplitError, FileFormatError, MissingInputError,
                    MissingMethodError, ShapeError, UnknownClassError)
from optimizers import RUN_CSV_HEADER, AlgorithmId, RunResult, solve
from problems import (InstanceDescriptor, ProblemInstance, derive_seed, get_class,
                      instance_from_descriptor)
from sampling import (LandscapeImage, SampleMatrix, build_image, load_image, load_sample_matrix,
                      make_sample_matrix, resize_image, save_image, save_sample_matrix)

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
LABEL_KINDS = ('problem-class', 'best-algorithm')
MANIFEST_NAME = 'manifest.tsv'
SAMPLES_NAME = 'samples.npz'
MANIFEST_COLUMNS = ['class_id', 'dim', 'seed', 'image_path', 'label', 'split', 'sample_hash']

DEFAULT_EPSILON = 1e-8
DEFAULT_RUNS = 5
BUDGET_PER_DIMENSION = 10000
PORTFOLIO = 'portfolio'
RANK_METHODS = [PORTFOLIO] + [a.name for a in AlgorithmId]
SELECTION_POLICIES = ('median', 'best-val')

# independent seed streams derived from the master seed
_SAMPLES_STREAM = 1
_SPLIT_STREAM = 2
_LABEL_STREAM = 3
_TRAIN_STREAM = 4
_BENCH_STREAM = 5


def default_budget(dim: int) -> int:
    return BUDGET_PER_DIMENSION * dim


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buffer.getvalue())


def _parallel(function: Callable, tasks: Sequence[tuple], workers: int) -> Iterator[Any]:
    """Results of ``function(*task)`` in task order, computed by up to ``workers`` processes."""
    if workers <= 1:
        for task in tasks:
            yield function(*task)
    else:
        yield from Parallel(n_jobs=workers, return_as='generator')(delayed(function)(*task) for task in tasks)


# ---------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class ManifestEntry:
    descriptor: InstanceDescriptor
    image_path: str
    label: int
    split: str
    sample_hash: str

    def to_line(self) -> str:
        d = self.descriptor
        return '\t'.join([str(d.class_id), str(d.dim), str(d.seed), self.image_path,
                          str(self.label), self.split, self.sample_hash])

    @classmethod
    def from_line(cls, line: str, source: str = '<manifest>') -> 'ManifestEntry':
        parts = line.rstrip('\n').split('\t')
        if len(parts) != len(MANIFEST_COLUMNS):
            raise FileFormatError(f"{source}: expected {len(MANIFEST_COLUMNS)} tab-separated fields, "
                                  f"got {len(parts)} in {line!r}")
        try:
            descriptor = InstanceDescriptor(int(parts[0]), int(parts[1]), int(parts[2]))
            label = int(parts[4])
        except ValueError:
            raise FileFormatError(f"{source}: non-integer id field in {line!r}")
        if parts[5] not in SPLITS:
            raise FileFormatError(f"{source}: unknown split tag {parts[5]!r}")
        return cls(descriptor, parts[3], label, parts[5], parts[6])


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    sample_hash: str
    label_kind: str
    label_names: List[str]
    samples_path: str = SAMPLES_NAME
    root: str = '.'

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def split(self, tag: str) -> List[ManifestEntry]:
        if tag not in SPLITS:
            raise ConfigError(f"Unknown split {tag!r}; expected one of {', '.join(SPLITS)}")
        return [e for e in self.entries if e.split == tag]

    def counts(self) -> Dict[str, int]:
        return {tag: len(self.split(tag)) for tag in SPLITS}

    def resolve(self, relative: str) -> str:
        return os.path.join(self.root, relative)

    def sample_matrix(self) -> SampleMatrix:
        sm = load_sample_matrix(self.resolve(self.samples_path))
        if sm.digest() != self.sample_hash:
            raise FileFormatError(f"Sample matrix {self.samples_path} has hash {sm.digest()}, "
                                  f"manifest expects {self.sample_hash}")
        return sm

    def rebased(self, new_root: str) -> 'DatasetManifest':
        """Same dataset with every path made relative to ``new_root``."""
        def rel(path):
            return os.path.relpath(os.path.abspath(self.resolve(path)), os.path.abspath(new_root))
        return replace(self, entries=[replace(e, image_path=rel(e.image_path)) for e in self.entries],
                       samples_path=rel(self.samples_path), root=new_root)

    def to_text(self) -> str:
        lines = [
            '# landscape-manifest v1',
            f"# label_kind={self.label_kind}",
            f"# label_names={','.join(self.label_names)}",
            f"# sample_hash={self.sample_hash}",
            f"# samples={self.samples_path}",
            '# columns=' + '\t'.join(MANIFEST_COLUMNS),
        ]
        lines += [e.to_line() for e in self.entries]
        return '\n'.join(lines) + '\n'

    def write(self, path: str):
        atomic_write_text(path, self.to_text())

    @classmethod
    def read(cls, path: str) -> 'DatasetManifest':
        try:
            with open(path, 'r', encoding='utf-8') as fh:
                lines = fh.read().splitlines()
        except FileNotFoundError:
            raise MissingInputError(f"Manifest not found: {path}")

        header: Dict[str, str] = {}
        entries: List[ManifestEntry] = []
        for line in lines:
            if not line.strip():
                continue
            if line.startswith('#'):
                key, sep, value = line[1:].strip().partition('=')
                if sep:
                    header[key.strip()] = value.strip()
                continue
            entries.append(ManifestEntry.from_line(line, source=path))

        missing = [k for k in ('label_kind', 'label_names', 'sample_hash', 'samples') if k not in header]
        if missing:
            raise FileFormatError(f"{path}: missing header fields {missing}")
        if header['label_kind'] not in LABEL_KINDS:
            raise FileFormatError(f"{path}: unknown label kind {header['label_kind']!r}")
        names = header['label_names'].split(',')
        for e in entries:
            if not 0 <= e.label < len(names):
                raise FileFormatError(f"{path}: label {e.label} outside 0..{len(names) - 1}")
            if e.sample_hash != header['sample_hash']:
                raise FileFormatError(f"{path}: entry {e.descriptor.to_line()!r} was imaged with sample "
                                      f"matrix {e.sample_hash}, manifest uses {header['sample_hash']}")
        return cls(entries=entries, sample_hash=header['sample_hash'], label_kind=header['label_kind'],
                   label_names=names, samples_path=header['samples'],
                   root=os.path.dirname(os.path.abspath(path)))


def stratified_split(groups: Sequence[int], seed: int) -> List[str]:
    """70/10/20 split tags, shuffled and rounded separately within each group."""
    tags = [''] * len(groups)
    for group in sorted(set(groups)):
        members = [i for i, g in enumerate(groups) if g == group]
        n = len(members)
        n_train = (7 * n + 5) // 10
        n_val = (n + 5) // 10
        order = np.random.default_rng(derive_seed(seed, _SPLIT_STREAM, group)).permutation(n)
        for rank, position in enumerate(order):
            if rank < n_train:
                tags[members[position]] = 'train'
            elif rank < n_train + n_val:
                tags[members[position]] = 'val'
            else:
                tags[members[position]] = 'test'
    return tags


def instance_descriptors(classes: Sequence[int], dim: int, instances_per_class: int) -> List[InstanceDescriptor]:
    if instances_per_class < 1:
        raise ConfigError(f"instances_per_class must be >= 1, got {instances_per_class}")
    if len(set(classes)) != len(classes):
        raise ConfigError(f"Duplicate class ids in {list(classes)}")
    return [InstanceDescriptor(int(c), dim, s) for c in classes for s in range(1, instances_per_class + 1)]


def _image_task(descriptor: InstanceDescriptor, sm: SampleMatrix) -> np.ndarray:
    return build_image(instance_from_descriptor(descriptor), sm).pixels


def _image_name(d: InstanceDescriptor) -> str:
    return os.path.join('images', f"c{d.class_id:02d}_d{d.dim}_s{d.seed}.lsim")


def dataset_sample_matrix(n_samples: int, dim: int, seed: int, mode: Optional[str] = None) -> SampleMatrix:
    """The sample matrix every image of a dataset built from ``seed`` shares."""
    return make_sample_matrix(n_samples, dim, mode=mode, seed=derive_seed(seed, _SAMPLES_STREAM))


def _image_dataset(classes: Sequence[int], dim: int, instances_per_class: int, n_samples: int,
                   seed: int, out_dir: str, mode: Optional[str], workers: int) -> DatasetManifest:
    class_list = [get_class(c) for c in classes]
    descriptors = instance_descriptors([fc.id for fc in class_list], dim, instances_per_class)
    sm = dataset_sample_matrix(n_samples, dim, seed, mode)
    save_sample_matrix(sm, os.path.join(out_dir, SAMPLES_NAME))
    digest = sm.digest()

    paths = []
    tasks = [(d, sm) for d in descriptors]
    for d, pixels in zip(descriptors, _parallel(_image_task, tasks, workers)):
        path = _image_name(d)
        save_image(LandscapeImage(pixels), os.path.join(out_dir, path))
        paths.append(path)

    position = {fc.id: i for i, fc in enumerate(class_list)}
    tags = stratified_split([d.class_id for d in descriptors], seed)
    entries = [ManifestEntry(d, p, position[d.class_id], t, digest)
               for d, p, t in zip(descriptors, paths, tags)]
    logger.info(f"Imaged {len(entries)} instances ({len(class_list)} classes, D={dim}, "
                f"{sm.mode} sampling N={sm.n}) into {out_dir}")
    return DatasetManifest(entries=entries, sample_hash=digest, label_kind='problem-class',
                           label_names=[fc.name for fc in class_list], root=out_dir)


def generate_class_dataset(classes: Sequence[int], dim: int, instances_per_class: int, n_samples: int,
                           seed: int, out_dir: str, mode: Optional[str] = None,
                           workers: int = 1) -> DatasetManifest:
    manifest = _image_dataset(classes, dim, instances_per_class, n_samples, seed, out_dir, mode, workers)
    manifest.write(os.path.join(out_dir, MANIFEST_NAME))
    logger.info(f"Class dataset split {manifest.counts()}")
    return manifest


def load_split(manifest: DatasetManifest, split: str, side: Optional[int] = None) -> ImageSet:
    """Images and labels of one split, optionally resized to ``side``."""
    entries = manifest.split(split)
    if not entries:
        raise EmptySplitError(f"The {split} split of the manifest is empty")
    images = []
    for e in entries:
        img = load_image(manifest.resolve(e.image_path))
        if side is not None and img.side != side:
            img = resize_image(img, side)
        images.append(img.pixels)
    return ImageSet(images=np.stack(images), labels=np.array([e.label for e in entries], dtype=int))


# ---------------------------------------------------------------------------
# labeling by best algorithm

@dataclass
class LabelRow:
    descriptor: InstanceDescriptor
    mean_errors: List[float]
    winner: Optional[AlgorithmId]
    split: str = ''

    @property
    def undetermined(self) -> bool:
        return self.winner is None

    def to_row(self) -> List[Any]:
        d = self.descriptor
        label = 'undetermined' if self.winner is None else self.winner.name
        return [d.class_id, d.dim, d.seed, self.split, *[repr(e) for e in self.mean_errors], label]


@dataclass
class LabelReport:
    rows: List[LabelRow]
    epsilon: float
    runs: int
    budget: int

    def eliminated_counts(self) -> Dict[str, int]:
        return {tag: sum(1 for r in self.rows if r.split == tag and r.undetermined) for tag in SPLITS}

    def label_counts(self) -> Dict[str, int]:
        counts = {a.name: 0 for a in AlgorithmId}
        for r in self.rows:
            if not r.undetermined:
                counts[r.winner.name] += 1
        return counts

    def summary_rows(self) -> List[List[Any]]:
        eliminated = self.eliminated_counts()
        rows = []
        for tag in SPLITS:
            total = sum(1 for r in self.rows if r.split == tag)
            rows.append([tag, total, eliminated[tag], total - eliminated[tag]])
        return rows

    def write_csv(self, path: str):
        header = ['class_id', 'dim', 'seed', 'split'] + [f"mean_error_{a.name}" for a in AlgorithmId] + ['label']
        write_csv(path, header, (r.to_row() for r in self.rows))

    def write_summary_csv(self, path: str):
        write_csv(path, ['split', 'instances', 'eliminated', 'kept'], self.summary_rows())


def decide_label(mean_errors: Sequence[float], epsilon: float = DEFAULT_EPSILON) -> Optional[AlgorithmId]:
    """Algorithm with the lowest mean error, or None when the instance cannot separate them.

    The label is undetermined when two or more algorithms reach the optimum
    (mean error <= epsilon) or when the lowest mean error is shared exactly.
    """
    errors = np.asarray(mean_errors, dtype=float)
    if len(errors) != len(AlgorithmId):
        raise ShapeError(f"Expected {len(AlgorithmId)} mean errors, got {len(errors)}")
    if np.count_nonzero(errors <= epsilon) >= 2:
        return None
    if np.count_nonzero(errors == errors.min()) > 1:
        return None
    return AlgorithmId(int(np.argmin(errors)))


def _label_seed(seed: int, algorithm: AlgorithmId, d: InstanceDescriptor, run: int) -> int:
    return derive_seed(seed, _LABEL_STREAM, int(algorithm), d.class_id, d.dim, d.seed, run)


def _run_key(algorithm: AlgorithmId, d: InstanceDescriptor, budget: int, run_seed: int) -> Dict[str, Any]:
    return {'algorithm': algorithm.name, 'class_id': d.class_id, 'dim': d.dim,
            'instance_seed': d.seed, 'run_seed': run_seed, 'budget': budget}


def _run_task(algorithm: int, descriptor: InstanceDescriptor, budget: int, run_seed: int) -> RunResult:
    return solve(AlgorithmId(algorithm), instance_from_descriptor(descriptor), budget, run_seed)


def collect_runs(tasks: Sequence[Tuple[AlgorithmId, InstanceDescriptor, int, int]],
                 store: Optional[RunStore] = None, workers: int = 1) -> List[RunResult]:
    """Run (algorithm, instance, budget, run seed) tasks, reusing runs already in ``store``.

    Results come back in task order whatever ``workers`` is; new runs are
    written to the store by this process only, as they complete.
    """
    results: List[Optional[RunResult]] = [None] * len(tasks)
    pending = []
    for i, (algorithm, d, budget, run_seed) in enumerate(tasks):
        cached = store.get(_run_key(algorithm, d, budget, run_seed)) if store else None
        if cached:
            results[i] = RunResult.from_dict(cached['run_data'])
        else:
            pending.append(i)
    if store:
        logger.info(f"{len(tasks) - len(pending)} of {len(tasks)} optimizer runs found in {store.db_path}")

    work = [(int(tasks[i][0]), tasks[i][1], tasks[i][2], tasks[i][3]) for i in pending]
    for done, (i, result) in enumerate(zip(pending, _parallel(_run_task, work, workers)), start=1):
        algorithm, d, budget, run_seed = tasks[i]
        if store:
            store.put(_run_key(algorithm, d, budget, run_seed), result.best_error, result.evals_used,
                      result.to_dict())
        results[i] = result
        if done % 50 == 0:
            logger.info(f"Finished {done}/{len(pending)} optimizer runs")
    return results


def _label_tasks(d: InstanceDescriptor, budget: int, runs: int, seed: int):
    return [(a, d, budget, _label_seed(seed, a, d, r)) for a in AlgorithmId for r in range(runs)]


def _label_row(d: InstanceDescriptor, results: Sequence[RunResult], runs: int, epsilon: float) -> LabelRow:
    errors = np.array([r.best_error for r in results], dtype=float).reshape(len(AlgorithmId), runs)
    means = [float(m) for m in errors.mean(axis=1)]
    return LabelRow(descriptor=d, mean_errors=means, winner=decide_label(means, epsilon))


def label_by_best_algorithm(inst: ProblemInstance, budget: Optional[int] = None, runs: int = DEFAULT_RUNS,
                            epsilon: float = DEFAULT_EPSILON, seed: int = 0,
                            store: Optional[RunStore] = None, workers: int = 1) -> LabelRow:
    """Run every algorithm ``runs`` times on ``inst`` and label it by lowest mean best error."""
    if runs < 1:
        raise ConfigError(f"runs must be >= 1, got {runs}")
    budget = default_budget(inst.dim) if budget is None else budget
    d = inst.descriptor
    results = collect_runs(_label_tasks(d, budget, runs, seed), store, workers)
    return _label_row(d, results, runs, epsilon)


def label_manifest(manifest: DatasetManifest, out_dir: str, budget: Optional[int] = None,
                   runs: int = DEFAULT_RUNS, epsilon: float = DEFAULT_EPSILON, seed: int = 0,
                   store: Optional[RunStore] = None,
                   workers: int = 1) -> Tuple[DatasetManifest, LabelReport]:
    """Relabel an imaged dataset by best algorithm, keeping its splits and
    eliminating undetermined instances from each of them."""
    if runs < 1:
        raise ConfigError(f"runs must be >= 1, got {runs}")
    if not manifest.entries:
        raise EmptySplitError("Manifest has no entries to label")
    dim = manifest.entries[0].descriptor.dim
    budget = default_budget(dim) if budget is None else budget

    tasks = []
    for e in manifest.entries:
        tasks += _label_tasks(e.descriptor, budget, runs, seed)
    results = collect_runs(tasks, store, workers)

    per_instance = len(AlgorithmId) * runs
    rows = []
    for k, e in enumerate(manifest.entries):
        row = _label_row(e.descriptor, results[k * per_instance:(k + 1) * per_instance], runs, epsilon)
        row.split = e.split
        rows.append(row)
    report = LabelReport(rows=rows, epsilon=epsilon, runs=runs, budget=budget)

    kept = [replace(e, label=int(r.winner)) for e, r in zip(manifest.entries, rows) if not r.undetermined]
    eliminated = report.eliminated_counts()
    for tag in SPLITS:
        if not any(e.split == tag for e in kept):
            raise EmptySplitError(f"Eliminating undetermined instances emptied the {tag} split "
                                  f"({eliminated[tag]} undetermined)")

    labeled = replace(manifest, entries=kept, label_kind='best-algorithm',
                      label_names=[a.name for a in AlgorithmId]).rebased(out_dir)
    labeled.write(os.path.join(out_dir, MANIFEST_NAME))
    report.write_csv(os.path.join(out_dir, 'label_report.csv'))
    report.write_summary_csv(os.path.join(out_dir, 'eliminated.csv'))
    logger.info(f"Labeled {len(rows)} instances: {report.label_counts()}, eliminated per split {eliminated}")
    return labeled, report


def generate_algorithm_dataset(classes: Sequence[int], dim: int, instances_per_class: int, n_samples: int,
                               seed: int, out_dir: str, budget: Optional[int] = None,
                               runs: int = DEFAULT_RUNS, epsilon: float = DEFAULT_EPSILON,
                               mode: Optional[str] = None, workers: int = 1,
                               store: Optional[RunStore] = None) -> Tuple[DatasetManifest, LabelReport]:
    imaged = _image_dataset(classes, dim, instances_per_class, n_samples, seed, out_dir, mode, workers)
    return label_manifest(imaged, out_dir, budget=budget, runs=runs, epsilon=epsilon, seed=seed,
                          store=store, workers=workers)


# ---------------------------------------------------------------------------
# accuracy

@dataclass
class AccuracyTable:
    class_names: List[str]
    correct: List[int]
    totals: List[int]
    confusion: np.ndarray = field(repr=False)

    @property
    def overall(self) -> float:
        return sum(self.correct) / sum(self.totals)

    @property
    def per_class(self) -> List[float]:
        return [c / t if t else float('nan') for c, t in zip(self.correct, self.totals)]

    @property
    def class_average(self) -> float:
        present = [c / t for c, t in zip(self.correct, self.totals) if t]
        return float(np.mean(present))

    def rows(self) -> List[List[Any]]:
        rows = [[name, t, c, f"{100.0 * a:.2f}%" if t else '-']
                for name, c, t, a in zip(self.class_names, self.correct, self.totals, self.per_class)]
        rows.append(['Average', '', '', f"{100.0 * self.class_average:.2f}%"])
        rows.append(['Overall', sum(self.totals), sum(self.correct), f"{100.0 * self.overall:.2f}%"])
        return rows

    def to_text(self) -> str:
        return tabulate(self.rows(), headers=['class', 'instances', 'correct', 'accuracy'])

    def to_csv(self, path: str):
        rows = [[name, t, c, repr(a)] for name, c, t, a in
                zip(self.class_names, self.correct, self.totals, self.per_class)]
        rows.append(['Average', '', '', repr(self.class_average)])
        rows.append(['Overall', sum(self.totals), sum(self.correct), repr(self.overall)])
        write_csv(path, ['class', 'instances', 'correct', 'accuracy'], rows)


def evaluate_accuracy(predictor, images, labels, class_names: Sequence[str]) -> AccuracyTable:
    """Per-class and overall accuracy of anything with a ``predict(images)`` method."""
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise EmptySplitError("Cannot measure accuracy on an empty split")
    predictions = np.asarray(predictor.predict(images), dtype=int)
    k = len(class_names)
    cm = confusion_matrix(labels, predictions, labels=list(range(k)))
    totals = np.bincount(labels, minlength=k)
    return AccuracyTable(class_names=list(class_names), correct=[int(c) for c in np.diag(cm)],
                         totals=[int(t) for t in totals], confusion=cm)


def evaluate_split(net: Network, manifest: DatasetManifest, split: str = 'test',
                   resize: bool = False) -> AccuracyTable:
    if net.config is not None and net.config.num_classes != manifest.num_classes:
        raise ConfigError(f"Network predicts {net.config.num_classes} classes, manifest has {manifest.num_classes}")
    side = net.config.input_side if (resize and net.config is not None) else None
    data = load_split(manifest, split, side)
    return evaluate_accuracy(net, data.images, data.labels, manifest.label_names)


# ---------------------------------------------------------------------------
# training with repetitions

@dataclass
class TrainingOutcome:
    network: Network
    histories: List[List[EpochRecord]]
    val_accuracies: List[float]
    test_accuracies: List[float]
    selected_repetition: int
    selection: str = 'median'

    @property
    def mean_test_accuracy(self) -> float:
        return float(np.mean(self.test_accuracies))


def select_repetition(val_accuracies: Sequence[float], test_accuracies: Sequence[float],
                      policy: str = 'median') -> int:
    """Index of the repetition handed on to the portfolio.

    ``median`` takes the repetition whose test accuracy is the (lower) median,
    falling back to validation accuracy when there is no test split;
    ``best-val`` takes the highest validation accuracy. Ties keep the earliest.
    """
    if policy not in SELECTION_POLICIES:
        raise ConfigError(f"Unknown selection policy {policy!r}; expected one of {', '.join(SELECTION_POLICIES)}")
    if not val_accuracies:
        raise ConfigError("No repetitions to select from")
    if policy == 'best-val':
        return int(np.argmax(val_accuracies))
    scores = val_accuracies if np.isnan(test_accuracies).any() else test_accuracies
    order = sorted(range(len(scores)), key=lambda k: (scores[k], k))
    return order[(len(order) - 1) // 2]


def train_classifier(manifest: DatasetManifest, arch: ArchitectureConfig, config: TrainConfig,
                     repetitions: int = 5, seed: int = 0, dtype=np.float64, resize: bool = False,
                     on_epoch: Optional[Callable[[EpochRecord], None]] = None,
                     selection: str = 'median') -> TrainingOutcome:
    """Train ``repetitions`` independently initialised networks and keep one
    according to ``selection`` (see ``select_repetition``)."""
    if repetitions < 1:
        raise ConfigError(f"repetitions must be >= 1, got {repetitions}")
    if selection not in SELECTION_POLICIES:
        raise ConfigError(f"Unknown selection policy {selection!r}; expected one of {', '.join(SELECTION_POLICIES)}")
    if arch.num_classes != manifest.num_classes:
        raise ConfigError(f"Architecture has {arch.num_classes} outputs, manifest has {manifest.num_classes} labels")
    side = arch.input_side if resize else None
    train_set = load_split(manifest, 'train', side)
    val_set = load_split(manifest, 'val', side)
    test_set = load_split(manifest, 'test', side) if manifest.split('test') else None

    networks, histories, val_accuracies, test_accuracies = [], [], [], []
    for rep in range(repetitions):
        net = build_network(arch, seed=derive_seed(seed, _TRAIN_STREAM, rep, 0), dtype=dtype)
        trained, history = train(net, train_set, val_set,
                                 replace(config, seed=derive_seed(seed, _TRAIN_STREAM, rep, 1)), on_epoch)
        val_acc = accuracy(trained.predict(val_set.images), val_set.labels)
        test_acc = (accuracy(trained.predict(test_set.images), test_set.labels)
                    if test_set is not None else float('nan'))
        networks.append(trained)
        histories.append(history)
        val_accuracies.append(val_acc)
        test_accuracies.append(test_acc)
        logger.info(f"Repetition {rep + 1}/{repetitions}: val accuracy {val_acc:.4f}, test accuracy {test_acc:.4f}")

    chosen = select_repetition(val_accuracies, test_accuracies, selection)
    logger.info(f"Keeping repetition {chosen + 1} ({selection})")
    return TrainingOutcome(network=networks[chosen], histories=histories, val_accuracies=val_accuracies,
                           test_accuracies=test_accuracies, selected_repetition=chosen, selection=selection)


# ---------------------------------------------------------------------------
# portfolio

@dataclass
class PortfolioResult:
    descriptor: InstanceDescriptor
    chosen: AlgorithmId
    sampling_evals: int
    solving_evals: int
    best_error: float
    seed: int
    probabilities: List[float]
    run: RunResult = field(repr=False)

    @property
    def total_evals(self) -> int:
        return self.sampling_evals + self.solving_evals

    def to_row(self) -> List[Any]:
        d = self.descriptor
        return [d.class_id, d.dim, d.seed, self.seed, self.chosen.name, self.sampling_evals,
                self.solving_evals, repr(self.best_error)]


PORTFOLIO_CSV_HEADER = ['class_id', 'dim', 'instance_seed', 'run_seed', 'chosen', 'sampling_evals',
                        'solving_evals', 'best_error']


def require_algorithm_labels(manifest: DatasetManifest):
    if manifest.label_kind != 'best-algorithm':
        raise ConfigError(f"The portfolio needs a best-algorithm manifest, got a {manifest.label_kind} one "
                          f"(labels {', '.join(manifest.label_names)})")


def predict_algorithm(predictor, inst: ProblemInstance, sm: SampleMatrix,
                      resize: bool = False) -> Tuple[AlgorithmId, np.ndarray]:
    """Image ``inst`` through ``sm`` (N evaluations) and pick the most probable algorithm."""
    image = build_image(inst, sm)
    config = getattr(predictor, 'config', None)
    side = getattr(config, 'input_side', None)
    if resize and side and image.side != side:
        image = resize_image(image, side)
    probabilities = np.asarray(predictor.predict_proba(image), dtype=float).ravel()
    if len(probabilities) != len(AlgorithmId):
        raise ShapeError(f"Selector returned {len(probabilities)} probabilities, "
                         f"expected one per algorithm ({len(AlgorithmId)})")
    return AlgorithmId(int(np.argmax(probabilities))), probabilities


def select_and_solve(inst: ProblemInstance, total_budget: int, net, sm: SampleMatrix, seed: int,
                     resize: bool = False) -> PortfolioResult:
    """Spend N evaluations on the landscape image, the rest on the predicted algorithm."""
    if sm.n >= total_budget:
        raise BudgetError(f"Sampling N={sm.n} leaves nothing of the total budget {total_budget}")
    chosen, probabilities = predict_algorithm(net, inst, sm, resize)
    run = solve(chosen, inst, total_budget - sm.n, seed)
    return PortfolioResult(descriptor=inst.descriptor, chosen=chosen, sampling_evals=sm.n,
                           solving_evals=run.evals_used, best_error=run.best_error, seed=int(seed),
                           probabilities=[float(p) for p in probabilities], run=run)


# ---------------------------------------------------------------------------
# rank tables and benchmark

def _class_label(class_id) -> str:
    try:
        return f"f{class_id} {get_class(class_id).name}"
    except UnknownClassError:
        return str(class_id)


@dataclass
class RankTable:
    classes: List[Any]
    methods: List[str]
    mean_errors: np.ndarray
    ranks: np.ndarray

    @property
    def average_ranks(self) -> np.ndarray:
        return self.ranks.mean(axis=0)

    def rank_rows(self) -> List[List[Any]]:
        rows = [[_class_label(c), *[int(r) for r in row]] for c, row in zip(self.classes, self.ranks)]
        rows.append(['Average', *[f"{a:.3f}" for a in self.average_ranks]])
        return rows

    def error_rows(self) -> List[List[Any]]:
        return [[_class_label(c), *[f"{e:.2E}" for e in row]] for c, row in zip(self.classes, self.mean_errors)]

    def _rows(self, table: str) -> List[List[Any]]:
        if table == 'ranks':
            return self.rank_rows()
        if table == 'errors':
            return self.error_rows()
        raise ConfigError(f"Unknown rank table view {table!r}; expected 'ranks' or 'errors'")

    def to_text(self, table: str = 'ranks') -> str:
        return tabulate(self._rows(table), headers=['class', *self.methods])

    def to_csv(self, path: str, table: str = 'ranks'):
        write_csv(path, ['class', *self.methods], self._rows(table))


def rank_table(errors: Dict[str, Dict[Any, Sequence[float]]],
               methods: Sequence[str] = tuple(RANK_METHODS)) -> RankTable:
    """Rank methods per class by mean error; tied methods share the better rank."""
    for m in methods:
        if m not in errors:
            raise MissingMethodError(f"No results for method {m!r}")
    classes = sorted(set().union(*[errors[m].keys() for m in methods]))
    for c in classes:
        for m in methods:
            if len(errors[m].get(c, ())) == 0:
                raise MissingMethodError(f"Method {m!r} has no runs on class {c}")
    means = np.array([[float(np.mean(errors[m][c])) for m in methods] for c in classes], dtype=float)
    ranks = np.vstack([rankdata(row, method='min') for row in means]).astype(int)
    return RankTable(classes=classes, methods=list(methods), mean_errors=means, ranks=ranks)


@dataclass
class BenchmarkReport:
    table: RankTable
    portfolio: List[PortfolioResult]
    single: List[RunResult]

    def write(self, out_dir: str):
        self.table.to_csv(os.path.join(out_dir, 'ranks.csv'), 'ranks')
        self.table.to_csv(os.path.join(out_dir, 'mean_errors.csv'), 'errors')
        write_csv(os.path.join(out_dir, 'portfolio_runs.csv'), PORTFOLIO_CSV_HEADER,
                   (p.to_row() for p in self.portfolio))
        write_csv(os.path.join(out_dir, 'algorithm_runs.csv'), RUN_CSV_HEADER,
                   (r.to_row() for r in self.single))


def run_benchmark(manifest: DatasetManifest, net, total_budget: Optional[int] = None,
                  runs: int = DEFAULT_RUNS, seed: int = 0, split: str = 'test', workers: int = 1,
                  store: Optional[RunStore] = None, resize: bool = False) -> BenchmarkReport:
    """Portfolio against each single algorithm, ``runs`` times on every instance of ``split``.

    Single algorithms get the full budget; the portfolio pays N for the image
    and runs its pick on the remainder.
    """
    if runs < 1:
        raise ConfigError(f"runs must be >= 1, got {runs}")
    require_algorithm_labels(manifest)
    entries = manifest.split(split)
    if not entries:
        raise EmptySplitError(f"The {split} split of the manifest is empty")
    sm = manifest.sample_matrix()
    total = default_budget(sm.dim) if total_budget is None else int(total_budget)
    if sm.n >= total:
        raise BudgetError(f"Sampling N={sm.n} leaves nothing of the total budget {total}")

    picks = []
    for e in entries:
        chosen, probabilities = predict_algorithm(net, instance_from_descriptor(e.descriptor), sm, resize)
        picks.append((chosen, probabilities))
    pick_counts = {a.name: sum(1 for c, _ in picks if c == a) for a in AlgorithmId}
    logger.info(f"Selector picks on {len(entries)} {split} instances: {pick_counts}")

    portfolio_tasks, single_tasks = [], []
    for e, (chosen, _) in zip(entries, picks):
        d = e.descriptor
        for r in range(runs):
            portfolio_tasks.append((chosen, d, total - sm.n,
                                    derive_seed(seed, _BENCH_STREAM, 0, d.class_id, d.dim, d.seed, r)))
            for a in AlgorithmId:
                single_tasks.append((a, d, total,
                                     derive_seed(seed, _BENCH_STREAM, 1 + int(a), d.class_id, d.dim, d.seed, r)))
    results = collect_runs(portfolio_tasks + single_tasks, store, workers)
    portfolio_runs, single_runs = results[:len(portfolio_tasks)], results[len(portfolio_tasks):]

    portfolio = []
    errors: Dict[str, Dict[int, List[float]]] = {m: {} for m in RANK_METHODS}
    for k, run in enumerate(portfolio_runs):
        chosen, probabilities = picks[k // runs]
        result = PortfolioResult(descriptor=run.descriptor, chosen=chosen, sampling_evals=sm.n,
                                 solving_evals=run.evals_used, best_error=run.best_error, seed=run.seed,
                                 probabilities=[float(p) for p in probabilities], run=run)
        if result.total_evals > total:
            raise BudgetError(f"Portfolio on {run.descriptor.to_line()} spent {result.total_evals} > {total}")
        portfolio.append(result)
        errors[PORTFOLIO].setdefault(run.descriptor.class_id, []).append(run.best_error)
    for run in single_runs:
        errors[run.algorithm.name].setdefault(run.descriptor.class_id, []).append(run.best_error)

    table = rank_table(errors)
    logger.info(f"Average ranks: {dict(zip(table.methods, np.round(table.average_ranks, 3).tolist()))}")
    return BenchmarkReport(table=table, portfolio=portfolio, single=single_runs)


def write_runs_csv(results: Sequence[RunResult], path: str):
    write_csv(path, RUN_CSV_HEADER, (r.to_row() for r in results))
