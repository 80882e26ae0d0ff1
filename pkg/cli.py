"""
Command-line entry point.

Every subcommand writes its artifacts only to the declared paths and prints a
single JSON status line on stdout; logs go to stderr. Exit status is 0 on
success, 1 on validation errors and 2 on I/O errors.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from collections.abc import Callable, Sequence
from typing import Any

import click

import formats_io
from config import get_config, resolve_threads
from crf_engine import CrfWeights, InferenceConfig, UpdateRule, UpdateSchedule
from evaluation import Interpolation, ablation_table, evaluate_proposals, sweep_weights
from services import DatasetService, RescoreService, TrainingService
from synth import SynthConfig, generate
from validators import parse_grid

_config = get_config()
logger = logging.getLogger('ctxcrf')

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


def _setup_logging() -> None:
    logging.basicConfig(
        level=_config.log_level,
        format='%(asctime)s %(levelname)s [%(name)s] %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        stream=sys.stderr,
        force=True,
    )


def _emit(payload: dict[str, Any]) -> None:
    click.echo(json.dumps(payload, allow_nan=False))


def _fail(command: str, code: int, message: str) -> None:
    _emit({'command': command, 'status': 'error', 'error': message})
    sys.exit(code)


def status_command(name: str) -> Callable[[Callable[..., dict[str, Any]]], Callable[..., None]]:
    """Wrap a command body: configure logging, print the status line, map errors to exit codes."""

    def decorator(fn: Callable[..., dict[str, Any]]) -> Callable[..., None]:
        @functools.wraps(fn)
        def wrapper(**kwargs: Any) -> None:
            _setup_logging()
            try:
                result = fn(**kwargs)
            except OSError as exc:
                logger.error('%s failed: %s', name, exc)
                _fail(name, EXIT_IO, str(exc))
            except ValueError as exc:
                logger.error('%s failed: %s', name, exc)
                _fail(name, EXIT_VALIDATION, str(exc))
            else:
                _emit({'command': name, 'status': 'ok', **result})

        return wrapper

    return decorator


class StatusGroup(click.Group):
    """Click group whose usage errors also exit 1 with a JSON status line."""

    def main(self, args: Any = None, prog_name: str | None = None, complete_var: str | None = None,
             standalone_mode: bool = True, **extra: Any) -> Any:
        try:
            return super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.UsageError as exc:
            exc.show()
            command = exc.ctx.info_name if exc.ctx is not None else 'ctxcrf'
            _fail(command or 'ctxcrf', EXIT_VALIDATION, exc.format_message())
        except click.ClickException as exc:
            exc.show()
            _fail('ctxcrf', EXIT_VALIDATION, exc.format_message())
        except click.Abort:
            _fail('ctxcrf', EXIT_VALIDATION, 'aborted')
        return None


def _path(**kwargs: Any) -> click.Path:
    return click.Path(dir_okay=False, **kwargs)


def inference_options(fn: Callable[..., Any]) -> Callable[..., Any]:
    options = [
        click.option('--iters', 'iters', type=int, default=_config.max_iterations, show_default=True,
                     help='Maximum mean-field iterations.'),
        click.option('--tol', type=float, default=_config.tolerance, show_default=True,
                     help='Stop when the largest marginal change is below this.'),
        click.option('--damping', type=float, default=_config.damping, show_default=True,
                     help='Weight of the previous iterate in each update, in [0, 1).'),
        click.option('--update-rule', type=click.Choice([r.value for r in UpdateRule]),
                     default=_config.update_rule, show_default=True,
                     help='Source labels feeding the context field.'),
        click.option('--schedule', type=click.Choice([s.value for s in UpdateSchedule]),
                     default=_config.update_schedule, show_default=True,
                     help='Update all proposals at once, or one at a time in index order.'),
        click.option('--max-proposals', type=int, default=_config.max_proposals, show_default=True,
                     help='Proposals kept per image, highest foreground score first.'),
        click.option('--threads', type=int, default=None,
                     help='Worker threads [default: available parallelism].'),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def evaluation_options(fn: Callable[..., Any]) -> Callable[..., Any]:
    options = [
        click.option('--iou', type=float, default=_config.iou_threshold, show_default=True,
                     help='IoU needed for a match.'),
        click.option('--interp', type=click.Choice([i.value for i in Interpolation]),
                     default=_config.interpolation, show_default=True,
                     help='11-point (VOC2007) or all-points AP.'),
        click.option('--threshold', type=float, default=_config.detection_threshold, show_default=True,
                     help='Minimum score for a (proposal, label) detection.'),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _inference_config(
    iters: int, tol: float, damping: float, update_rule: str, schedule: str, max_proposals: int
) -> InferenceConfig:
    return InferenceConfig(
        max_iterations=iters,
        tolerance=tol,
        damping=damping,
        score_clamp=_config.score_clamp,
        max_proposals=max_proposals,
        update_rule=UpdateRule(update_rule),
        schedule=UpdateSchedule(schedule),
    )


def _load_models(pairwise_path: str, scene_path: str) -> tuple[Any, Any]:
    pairwise = formats_io.read_pairwise_model(pairwise_path)
    scene = formats_io.read_scene_model(scene_path)
    if pairwise.categories.names != scene.categories.names:
        raise ValueError(f'{pairwise_path} and {scene_path} use different category lists')
    return pairwise, scene


def _check_score_columns(inputs: Any, num_labels: int, path: str) -> None:
    for ps in inputs:
        if len(ps) and ps.num_labels != num_labels:
            raise ValueError(
                f'{path}: image {ps.image_id!r} has {ps.num_labels} score columns, expected {num_labels}'
            )


@click.group(cls=StatusGroup)
def cli() -> None:
    """Context CRF rescoring of object-detection proposals."""


@cli.command('learn-pairwise')
@click.option('--annotations', required=True, type=_path(), help='Ground-truth annotations (JSON lines).')
@click.option('--categories', required=True, type=_path(), help='Category list or any JSON with "categories".')
@click.option('--alpha', type=float, default=_config.alpha, show_default=True, help='Add-alpha smoothing.')
@click.option('--out', required=True, type=_path(), help='Pairwise model JSON.')
@status_command('learn-pairwise')
def learn_pairwise_cmd(annotations: str, categories: str, alpha: float, out: str) -> dict[str, Any]:
    """Learn co-occurrence/layout statistics P(a, b, r)."""
    space = formats_io.read_categories(categories)
    truth = formats_io.read_annotations(annotations, space)
    model = TrainingService.learn_pairwise(truth, alpha)
    formats_io.write_model(out, model)
    return {'out': out, 'images': len(truth), 'pairs': int(model.counts.sum()), 'smoothing_only': model.smoothing_only}


@cli.command('train-scene')
@click.option('--features', required=True, type=_path(), help='Scene features (JSON lines).')
@click.option('--annotations', required=True, type=_path(), help='Ground-truth annotations (JSON lines).')
@click.option('--categories', type=_path(), default=None,
              help='Category list [default: sorted names in the annotations].')
@click.option('--lambda', 'lam', type=float, default=_config.scene_lambda, show_default=True,
              help='L2 penalty on the weights.')
@click.option('--epochs', type=int, default=_config.scene_epochs, show_default=True, help='Gradient steps.')
@click.option('--lr', type=float, default=_config.scene_learning_rate, show_default=True, help='Learning rate.')
@click.option('--seed', type=int, default=_config.scene_seed, show_default=True, help='Trainer seed.')
@click.option('--out', required=True, type=_path(), help='Scene-prior model JSON.')
@status_command('train-scene')
def train_scene_cmd(
    features: str,
    annotations: str,
    categories: str | None,
    lam: float,
    epochs: int,
    lr: float,
    seed: int,
    out: str,
) -> dict[str, Any]:
    """Train the one-vs-rest logistic scene prior."""
    space = formats_io.read_categories(categories) if categories else None
    truth = formats_io.read_annotations(annotations, space)
    model = TrainingService.train_scene(truth, formats_io.read_features(features), lam, epochs, lr, seed)
    formats_io.write_model(out, model)
    report = model.report
    return {
        'out': out,
        'images': report.num_images if report else len(truth),
        'final_loss': report.losses[-1] if report else None,
        'degenerate_categories': list(report.degenerate_categories) if report else [],
    }


@cli.command('rescore')
@click.option('--detections', required=True, type=_path(), help='Detector proposals (JSON lines).')
@click.option('--pairwise', required=True, type=_path(), help='Pairwise model JSON.')
@click.option('--scene-prior', required=True, type=_path(), help='Scene-prior model JSON.')
@click.option('--features', required=True, type=_path(), help='Scene features (JSON lines).')
@click.option('--omega-p', required=True, type=float, help='Pairwise weight.')
@click.option('--omega-g', required=True, type=float, help='Global weight.')
@inference_options
@click.option('--out', required=True, type=_path(), help='Rescored detections (JSON lines).')
@status_command('rescore')
def rescore_cmd(
    detections: str,
    pairwise: str,
    scene_prior: str,
    features: str,
    omega_p: float,
    omega_g: float,
    iters: int,
    tol: float,
    damping: float,
    update_rule: str,
    schedule: str,
    max_proposals: int,
    threads: int | None,
    out: str,
) -> dict[str, Any]:
    """Replace detector scores by mean-field marginals."""
    cfg = _inference_config(iters, tol, damping, update_rule, schedule, max_proposals)
    weights = CrfWeights(omega_p, omega_g)
    pairwise_model, scene_model = _load_models(pairwise, scene_prior)
    inputs = DatasetService.load_inputs(detections, features)
    _check_score_columns(inputs.proposals, pairwise_model.categories.num_labels, detections)
    rescored = RescoreService.rescore_images(
        inputs, pairwise_model, scene_model, weights, cfg, resolve_threads(threads)
    )
    formats_io.write_detections(out, rescored)
    converged = sum(1 for ps in rescored if ps.inference is not None and ps.inference.converged)
    return {'out': out, 'images': len(rescored), 'converged': converged}


@cli.command('evaluate')
@click.option('--detections', required=True, type=_path(), help='Detections (JSON lines).')
@click.option('--annotations', required=True, type=_path(), help='Ground-truth annotations (JSON lines).')
@click.option('--categories', type=_path(), default=None,
              help='Category list [default: sorted names in the annotations].')
@evaluation_options
@click.option('--out', required=True, type=_path(), help='Report JSON.')
@click.option('--text', 'text_out', type=_path(), default=None, help='Also write the aligned text table here.')
@status_command('evaluate')
def evaluate_cmd(
    detections: str,
    annotations: str,
    categories: str | None,
    iou: float,
    interp: str,
    threshold: float,
    out: str,
    text_out: str | None,
) -> dict[str, Any]:
    """Per-class VOC AP and mAP."""
    space = formats_io.read_categories(categories) if categories else None
    truth = formats_io.read_annotations(annotations, space)
    proposals = formats_io.read_detections(detections)
    _check_score_columns(proposals, truth.categories.num_labels, detections)
    report = evaluate_proposals(proposals, truth, threshold, iou, Interpolation(interp))
    formats_io.write_report(out, report, text_out)
    return {'out': out, 'map': report.map, 'ap': report.ap_by_name()}


@cli.command('sweep')
@click.option('--detections', required=True, type=_path(), help='Detector proposals (JSON lines).')
@click.option('--annotations', required=True, type=_path(), help='Ground-truth annotations (JSON lines).')
@click.option('--pairwise', required=True, type=_path(), help='Pairwise model JSON.')
@click.option('--scene-prior', required=True, type=_path(), help='Scene-prior model JSON.')
@click.option('--features', required=True, type=_path(), help='Scene features (JSON lines).')
@click.option('--omega-p-grid', required=True, help='a:b:step, a single value, or a comma list.')
@click.option('--omega-g-grid', required=True, help='a:b:step, a single value, or a comma list.')
@inference_options
@evaluation_options
@click.option('--out', required=True, type=_path(), help='Sweep table (CSV).')
@status_command('sweep')
def sweep_cmd(
    detections: str,
    annotations: str,
    pairwise: str,
    scene_prior: str,
    features: str,
    omega_p_grid: str,
    omega_g_grid: str,
    iters: int,
    tol: float,
    damping: float,
    update_rule: str,
    schedule: str,
    max_proposals: int,
    threads: int | None,
    iou: float,
    interp: str,
    threshold: float,
    out: str,
) -> dict[str, Any]:
    """Evaluate mAP over a grid of (omega_p, omega_g)."""
    grid_p = parse_grid(omega_p_grid, '--omega-p-grid')
    grid_g = parse_grid(omega_g_grid, '--omega-g-grid')
    cfg = _inference_config(iters, tol, damping, update_rule, schedule, max_proposals)
    pairwise_model, scene_model = _load_models(pairwise, scene_prior)
    truth = formats_io.read_annotations(annotations, pairwise_model.categories)
    inputs = DatasetService.load_inputs(detections, features)
    _check_score_columns(inputs.proposals, pairwise_model.categories.num_labels, detections)
    result = sweep_weights(
        inputs,
        truth,
        pairwise_model,
        scene_model,
        grid_p,
        grid_g,
        cfg,
        threshold,
        iou,
        Interpolation(interp),
        resolve_threads(threads),
    )
    formats_io.write_sweep(out, result)
    baseline = next((row.map for row in result.rows if row.omega_p == 0.0 and row.omega_g == 0.0), None)
    return {
        'out': out,
        'points': len(result.rows),
        'best': {'omega_p': result.best.omega_p, 'omega_g': result.best.omega_g, 'map': result.best.map},
        'baseline_map': baseline,
    }


@cli.command('compare')
@click.option('--detections', required=True, type=_path(), help='Detector proposals (JSON lines).')
@click.option('--annotations', required=True, type=_path(), help='Ground-truth annotations (JSON lines).')
@click.option('--pairwise', required=True, type=_path(), help='Pairwise model JSON.')
@click.option('--scene-prior', required=True, type=_path(), help='Scene-prior model JSON.')
@click.option('--features', required=True, type=_path(), help='Scene features (JSON lines).')
@click.option('--omega-p', required=True, type=float, help='Pairwise weight.')
@click.option('--omega-g', required=True, type=float, help='Global weight.')
@inference_options
@evaluation_options
@click.option('--out', required=True, type=_path(), help='Ablation report JSON.')
@click.option('--text', 'text_out', type=_path(), default=None, help='Also write the aligned text table here.')
@status_command('compare')
def compare_cmd(
    detections: str,
    annotations: str,
    pairwise: str,
    scene_prior: str,
    features: str,
    omega_p: float,
    omega_g: float,
    iters: int,
    tol: float,
    damping: float,
    update_rule: str,
    schedule: str,
    max_proposals: int,
    threads: int | None,
    iou: float,
    interp: str,
    threshold: float,
    out: str,
    text_out: str | None,
) -> dict[str, Any]:
    """Baseline against pairwise-only, global-only and combined context."""
    cfg = _inference_config(iters, tol, damping, update_rule, schedule, max_proposals)
    pairwise_model, scene_model = _load_models(pairwise, scene_prior)
    truth = formats_io.read_annotations(annotations, pairwise_model.categories)
    inputs = DatasetService.load_inputs(detections, features)
    _check_score_columns(inputs.proposals, pairwise_model.categories.num_labels, detections)
    table = ablation_table(
        inputs,
        truth,
        pairwise_model,
        scene_model,
        CrfWeights(omega_p, omega_g),
        cfg,
        threshold,
        iou,
        Interpolation(interp),
        resolve_threads(threads),
    )
    formats_io.write_report(out, table, text_out)
    return {'out': out, 'map': {name: report.map for name, report in table.reports.items()}}


@cli.command('synth')
@click.option('--config', 'config_path', type=_path(), default=None,
              help='Generator config JSON [default: the built-in harbor/station fixture].')
@click.option('--out-dir', required=True, type=click.Path(file_okay=False), help='Output directory.')
@status_command('synth')
def synth_cmd(config_path: str | None, out_dir: str) -> dict[str, Any]:
    """Generate a seeded synthetic dataset with planted context."""
    if config_path:
        with open(config_path, encoding='utf-8') as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f'{config_path}: invalid JSON: {exc.msg}') from None
        if not isinstance(raw, dict):
            raise ValueError(f'{config_path}: expected a JSON object')
        synth_config = SynthConfig.from_dict(raw)
    else:
        synth_config = SynthConfig()
    dataset = generate(synth_config)
    paths = DatasetService.export_synthetic(dataset, out_dir)
    return {'out_dir': out_dir, 'scenes': len(dataset.scenes), 'skipped': len(dataset.skipped), 'files': paths}


def run(argv: Sequence[str] | None = None) -> int:
    """Run one command and return its exit status instead of exiting."""
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name='ctxcrf')
    except SystemExit as exc:
        if exc.code is None:
            return EXIT_OK
        return exc.code if isinstance(exc.code, int) else EXIT_VALIDATION
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(run())
