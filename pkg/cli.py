#!/usr/bin/env python3
"""
Landscape Selector CLI - image optimization landscapes, train the selector, run the portfolio
"""

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from rich.console import Console
from rich.logging import RichHandler
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from convnet import load_checkpoint, save_checkpoint, write_history_csv
from database import RunStore, atomic_write_text
from errors import LandscapeError, MissingInputError
from pipeline import (MANIFEST_NAME, SAMPLES_NAME, DatasetManifest, dataset_sample_matrix, evaluate_split,
                      generate_algorithm_dataset, generate_class_dataset, label_manifest, run_benchmark,
                      require_algorithm_labels, select_and_solve, train_classifier, write_runs_csv, write_csv,
                      PORTFOLIO_CSV_HEADER)
from problems import get_class, make_instance
from run_config import RunConfig
from sampling import save_sample_matrix

console = Console()
logger = logging.getLogger('landscape')

# flag -> (config key, type, help)
FLAGS = [
    ('--config', None, str, 'Text config file of key = value lines'),
    ('--dim', 'dim', int, 'Problem dimension D'),
    ('--classes', 'classes', str, 'Suite size (e.g. 12) or comma-separated class ids (e.g. 1,3,4)'),
    ('--instances-per-class', 'instances_per_class', int, 'Instances generated per class'),
    ('--samples', 'samples', int, 'Sample count N (a perfect square)'),
    ('--mode', 'sample_mode', str, 'Sampling mode: grid or random (default: grid for D=2)'),
    ('--budget', 'budget', int, 'Total evaluation budget per run (default 10000*D)'),
    ('--runs', 'runs', int, 'Runs per algorithm and instance'),
    ('--epsilon', 'epsilon', float, 'Mean error counted as reaching the optimum'),
    ('--arch', 'arch', str, 'Network variant: a (100x100 input) or b (45x45 input)'),
    ('--width-scale', 'width_scale', str, 'Channel width multiplier, e.g. 1/8'),
    ('--epochs', 'epochs', int, 'Training epochs'),
    ('--batch', 'batch', int, 'Mini-batch size'),
    ('--lr', 'lr', float, 'Adam learning rate'),
    ('--chunk-size', 'chunk_size', int, 'Images per forward/backward chunk'),
    ('--repetitions', 'repetitions', int, 'Independent training repetitions'),
    ('--selection', 'selection', str, 'Repetition kept for the portfolio: median (test accuracy) or best-val'),
    ('--precision', 'precision', int, 'Parameter precision in bytes: 4 or 8'),
    ('--seed', 'seed', int, 'Master seed for all randomness'),
    ('--workers', 'workers', int, 'Worker processes'),
    ('--out', 'out', str, 'Output directory'),
    ('--manifest', 'manifest', str, 'Dataset manifest (manifest.tsv)'),
    ('--checkpoint', 'checkpoint', str, 'Network checkpoint (.lsnn)'),
    ('--run-store', 'run_store', str, 'sqlite run cache (default <out>/runs.db)'),
    ('--split', 'split', str, 'Split to evaluate: train, val or test'),
    ('--class-id', 'class_id', int, 'Function class id for solve'),
    ('--instance-seed', 'instance_seed', int, 'Instance seed for solve'),
    ('--log-level', 'log_level', str, 'DEBUG, INFO, WARNING or ERROR'),
]


def _progress():
    return Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"),
                    console=console, transient=True)


class LandscapeCLI:
    def __init__(self, config: RunConfig):
        self.config = config
        os.makedirs(config.out, exist_ok=True)
        config.dump(os.path.join(config.out, 'resolved_config.txt'))

    def _path(self, name: str) -> str:
        return os.path.join(self.config.out, name)

    def _require(self, key: str, what: str) -> str:
        value = getattr(self.config, key)
        if not value:
            raise MissingInputError(f"{what} is required (--{key.replace('_', '-')})")
        return value

    def _manifest(self) -> DatasetManifest:
        return DatasetManifest.read(self._require('manifest', 'A dataset manifest'))

    def _checkpoint(self):
        return load_checkpoint(self._require('checkpoint', 'A network checkpoint'))

    def gen_samples(self):
        """Build and save the shared sample matrix"""
        cfg = self.config
        sm = dataset_sample_matrix(cfg.samples, cfg.dim, cfg.seed, cfg.sample_mode or None)
        path = self._path(SAMPLES_NAME)
        save_sample_matrix(sm, path)

        table = Table(show_header=False)
        table.add_column("Property", style="cyan")
        table.add_column("Value", style="white")
        table.add_row("Samples (N)", str(sm.n))
        table.add_row("Dimension (D)", str(sm.dim))
        table.add_row("Image side", f"{sm.side} x {sm.side}")
        table.add_row("Mode", sm.mode)
        table.add_row("Hash", sm.digest())
        console.print(table)
        console.print(f"[green]✓[/green] Sample matrix written to {path}")

    def gen_dataset(self):
        """Image every instance and write a problem-class manifest"""
        cfg = self.config
        with _progress() as progress:
            progress.add_task("Imaging instances...", total=None)
            manifest = generate_class_dataset(cfg.class_ids(), cfg.dim, cfg.instances_per_class, cfg.samples,
                                              cfg.seed, cfg.out, mode=cfg.sample_mode or None,
                                              workers=cfg.workers)
        self._display_counts(manifest)
        console.print(f"[green]✓[/green] Manifest written to {self._path(MANIFEST_NAME)}")

    def label(self):
        """Label instances by best algorithm and eliminate undetermined ones"""
        cfg = self.config
        store = RunStore(cfg.store_path)
        with _progress() as progress:
            progress.add_task(f"Running {cfg.runs} runs x 3 algorithms per instance...", total=None)
            if cfg.manifest:
                manifest, report = label_manifest(DatasetManifest.read(cfg.manifest), cfg.out,
                                                  budget=cfg.budget, runs=cfg.runs, epsilon=cfg.epsilon,
                                                  seed=cfg.seed, store=store, workers=cfg.workers)
            else:
                manifest, report = generate_algorithm_dataset(
                    cfg.class_ids(), cfg.dim, cfg.instances_per_class, cfg.samples, cfg.seed, cfg.out,
                    budget=cfg.budget, runs=cfg.runs, epsilon=cfg.epsilon, mode=cfg.sample_mode or None,
                    workers=cfg.workers, store=store)

        labels_table = Table(title="Labels")
        labels_table.add_column("Algorithm", style="cyan")
        labels_table.add_column("Instances", style="green")
        for name, count in report.label_counts().items():
            labels_table.add_row(name, str(count))
        console.print(labels_table)

        elimination = Table(title="Undetermined instances")
        for column in ("Split", "Instances", "Eliminated", "Kept"):
            elimination.add_column(column)
        for row in report.summary_rows():
            elimination.add_row(*[str(v) for v in row])
        console.print(elimination)
        console.print(f"[green]✓[/green] Manifest and label report written to {cfg.out}")

    def train(self):
        """Train the classifier and keep the repetition chosen by --selection"""
        cfg = self.config
        manifest = self._manifest()
        arch = cfg.arch_config(manifest.num_classes)
        outcome = train_classifier(manifest, arch, cfg.train_config(), repetitions=cfg.repetitions,
                                   seed=cfg.seed, dtype=cfg.dtype, resize=cfg.resize,
                                   selection=cfg.selection)

        checkpoint = self._path('checkpoint.lsnn')
        save_checkpoint(outcome.network, checkpoint)
        write_history_csv(outcome.histories[outcome.selected_repetition], self._path('history.csv'))
        rows = [[k + 1, repr(v), repr(t)] for k, (v, t) in
                enumerate(zip(outcome.val_accuracies, outcome.test_accuracies))]
        write_csv(self._path('repetitions.csv'), ['repetition', 'val_acc', 'test_acc'], rows)

        table = Table(title=f"Variant ({arch.variant}), width scale {arch.width_scale}")
        table.add_column("Repetition", style="cyan")
        table.add_column("Validation", style="white")
        table.add_column("Test", style="white")
        for k, (v, t) in enumerate(zip(outcome.val_accuracies, outcome.test_accuracies)):
            marker = " *" if k == outcome.selected_repetition else ""
            table.add_row(f"{k + 1}{marker}", f"{100 * v:.2f}%", f"{100 * t:.2f}%")
        console.print(table)
        console.print(f"Layers: {' '.join(outcome.network.summary())}")
        console.print(f"Average test accuracy: [bold]{100 * outcome.mean_test_accuracy:.2f}%[/bold]")
        console.print(f"[green]✓[/green] Checkpoint written to {checkpoint}")

    def evaluate(self):
        """Accuracy table of a checkpoint on one split"""
        cfg = self.config
        table = evaluate_split(self._checkpoint(), self._manifest(), cfg.split, resize=cfg.resize)
        table.to_csv(self._path(f"accuracy_{cfg.split}.csv"))
        text = table.to_text()
        atomic_write_text(self._path(f"accuracy_{cfg.split}.txt"), text + "\n")
        console.print(text)

    def solve(self):
        """Sample, pick an algorithm, and solve one instance with the remaining budget"""
        cfg = self.config
        manifest = self._manifest()
        require_algorithm_labels(manifest)
        net = self._checkpoint()
        sm = manifest.sample_matrix()
        inst = make_instance(cfg.class_id, sm.dim, cfg.instance_seed)
        result = select_and_solve(inst, cfg.budget_for(sm.dim), net, sm, cfg.seed, resize=cfg.resize)
        write_csv(self._path('solve.csv'), PORTFOLIO_CSV_HEADER, [result.to_row()])
        write_runs_csv([result.run], self._path('solve_run.csv'))

        table = Table(show_header=False)
        table.add_column("Property", style="cyan")
        table.add_column("Value", style="white")
        table.add_row("Instance", f"{get_class(cfg.class_id).name} D={sm.dim} seed={cfg.instance_seed}")
        table.add_row("Chosen algorithm", result.chosen.name)
        table.add_row("Probabilities", ", ".join(f"{p:.3f}" for p in result.probabilities))
        table.add_row("Sampling evaluations", str(result.sampling_evals))
        table.add_row("Solving evaluations", str(result.solving_evals))
        table.add_row("Best error", f"{result.best_error:.3E}")
        console.print(table)

    def bench(self):
        """Portfolio against each single algorithm: rank and mean-error tables"""
        cfg = self.config
        manifest = self._manifest()
        net = self._checkpoint()
        with _progress() as progress:
            progress.add_task("Benchmarking portfolio and single algorithms...", total=None)
            report = run_benchmark(manifest, net, total_budget=cfg.budget, runs=cfg.runs, seed=cfg.seed,
                                   split=cfg.split, workers=cfg.workers, store=RunStore(cfg.store_path),
                                   resize=cfg.resize)
        report.write(cfg.out)
        for view, title, name in (('ranks', 'Ranks', 'ranks.txt'), ('errors', 'Mean errors', 'mean_errors.txt')):
            text = report.table.to_text(view)
            atomic_write_text(self._path(name), text + "\n")
            console.print(f"\n[bold blue]{title}[/bold blue]")
            console.print(text)

    def _display_counts(self, manifest: DatasetManifest):
        table = Table(title=f"{manifest.label_kind} dataset")
        table.add_column("Split", style="cyan")
        table.add_column("Instances", style="green")
        for tag, count in manifest.counts().items():
            table.add_row(tag, str(count))
        console.print(table)


COMMANDS = {
    'gen-samples': ('gen_samples', 'Build the shared sample matrix'),
    'gen-dataset': ('gen_dataset', 'Image instances into a problem-class dataset'),
    'label': ('label', 'Label instances by best algorithm (imaging first unless --manifest is given)'),
    'train': ('train', 'Train the classifier on a manifest'),
    'eval': ('evaluate', 'Accuracy of a checkpoint on a manifest split'),
    'solve': ('solve', 'Run the portfolio on one instance'),
    'bench': ('bench', 'Compare the portfolio with each single algorithm'),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    for flag, _, kind, help_text in FLAGS:
        common.add_argument(flag, type=kind, default=None, help=help_text)
    common.add_argument('--resize', action='store_true', default=None,
                        help='Resize images to the network input side instead of failing on mismatch')

    parser = argparse.ArgumentParser(
        description='Landscape Selector - pick an optimizer from an image of the fitness landscape',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s gen-dataset --classes 1,3,4 --dim 2 --instances-per-class 100 --samples 2025 --out data
  %(prog)s train --manifest data/manifest.tsv --arch b --width-scale 1/8 --epochs 30 --out model
  %(prog)s eval --manifest data/manifest.tsv --checkpoint model/checkpoint.lsnn --out model
  %(prog)s label --classes 6 --dim 10 --samples 10000 --runs 5 --workers 8 --out algo
  %(prog)s bench --manifest algo/manifest.tsv --checkpoint algo-model/checkpoint.lsnn --out bench
        """
    )
    subparsers = parser.add_subparsers(dest='command', help='Available commands')
    for name, (_, help_text) in COMMANDS.items():
        subparsers.add_parser(name, help=help_text, parents=[common])
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    values = {key: getattr(args, flag[2:].replace('-', '_')) for flag, key, _, _ in FLAGS if key}
    values['resize'] = args.resize
    return values


def _setup_logging(level: str):
    logging.basicConfig(level=level.upper(), format="%(message)s", datefmt="[%X]",
                        handlers=[RichHandler(console=console, show_path=False)], force=True)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 1

    try:
        config = RunConfig.resolve(_overrides(args), config_path=args.config)
        _setup_logging(config.log_level)
        cli = LandscapeCLI(config)
        getattr(cli, COMMANDS[args.command][0])()
    except KeyboardInterrupt:
        console.print("\n[yellow]Interrupted by user[/yellow]")
        return 130
    except LandscapeError as e:
        logger.error(f"{args.command} failed: {e}")
        console.print(f"\n[red]Error:[/red] {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly")
        console.print(f"\n[red]Error: {e}[/red]")
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
