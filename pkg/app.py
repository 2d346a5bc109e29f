"""Command-line entry point for the scanner-robust mitosis detection workflow.

    python app.py gen-data --out corpus/
    python app.py train-transfer --corpus corpus/ --out runs/transfer
    python app.py train-detector --corpus corpus/ --transfer runs/transfer --out runs/detector
    python app.py infer --model runs/detector --corpus corpus/ --scanner 4 --out runs/infer
    python app.py eval --predictions runs/infer/predictions.json --corpus corpus/ --scanner 4
"""
import json
import logging
import time
from pathlib import Path
from typing import Dict, Tuple

import click
import pandas as pd
import torch

from components.results_display import ResultsDisplay
from config import (CHECKPOINT_FILE, CORPUS_DIR, HISTORY_FILE, LOG_FORMAT, LOG_LEVEL, MANIFEST_FILE, NUM_THREADS,
                    PREDICTIONS_FILE, REPORT_FILE, REPORT_TEXT_FILE, TRANSFER_GALLERY_FILE, TRANSFER_REPORT_FILE)
from data.checkpoint_store import Checkpoint, load_checkpoint, save_checkpoint
from data.corpus_store import read_corpus, write_corpus
from data.synth_corpus import CorpusConfig, generate_corpus
from utils.error_handler import CheckpointFormatError, ErrorHandler
from utils.evaluation_engine import (EvalConfig, evaluate, ground_truth_of, infer_corpus, read_predictions,
                                     scanners_of, write_predictions)
from utils.run_config import RunManifest, load_config_file, resolve_config, write_manifest
from utils.training_pipeline import TrainConfig, load_detector, train_detector
from utils.transfer_evaluation import evaluate_transfer, transfer_gallery, write_gallery
from utils.transfer_module import TransferConfig, load_transfer_models, train_transfer

# Keys that may change between a checkpoint and the run resuming from it
RESUMABLE_KEYS = {'iterations', 'log_every', 'checkpoint_every'}

LOG_LEVELS = click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False)


def setup_logging(level: str):
    logging.basicConfig(level=getattr(logging, level.upper()), format=LOG_FORMAT, force=True)


def checkpoint_path(path: str) -> Path:
    """Accept a checkpoint file or the run directory holding one"""
    p = Path(path)
    return p / CHECKPOINT_FILE if p.is_dir() else p


def load_corpus(path: str, scanners: Tuple[int, ...] = ()):
    ErrorHandler.require_path(path, "Corpus directory", must_be_dir=True)
    corpus = read_corpus(path)
    return corpus.filter(scanners) if scanners else corpus


def check_resume(checkpoint: Checkpoint, config: Dict, path: str):
    changed = sorted(k for k in set(config) | set(checkpoint.config)
                     if k not in RESUMABLE_KEYS and config.get(k) != checkpoint.config.get(k))
    if changed:
        raise CheckpointFormatError(path, f"cannot resume with changed config keys: {', '.join(changed)}")


def save_run(out: Path, checkpoint: Checkpoint):
    save_checkpoint(checkpoint, out / CHECKPOINT_FILE)
    pd.DataFrame(checkpoint.history).to_csv(out / HISTORY_FILE, index=False)


@click.group()
@click.option('--log-level', type=LOG_LEVELS, default=LOG_LEVEL, show_default=True, help="Logging verbosity")
@click.option('--quiet', is_flag=True, help="No progress bars or tables")
@click.pass_context
def cli(ctx, log_level, quiet):
    """Synthetic-scanner mitosis detection: data, style transfer, detector, evaluation."""
    setup_logging(log_level)
    if NUM_THREADS > 0:
        torch.set_num_threads(NUM_THREADS)
    ctx.obj = {'quiet': quiet, 'display': ResultsDisplay(quiet=quiet)}


@cli.command('gen-data')
@click.option('--out', required=True, type=click.Path(file_okay=False), help="Corpus directory to write")
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False), help="YAML run config")
@click.option('--seed', type=int, help="Corpus seed")
@click.option('--slides-per-scanner', type=int)
@click.option('--slide-size', type=int)
@click.option('--mitoses-per-slide', type=int)
@click.option('--distractors-per-slide', type=int)
@click.option('--n-jobs', type=int, help="Parallel slide workers")
@click.pass_context
@ErrorHandler.handle_gracefully("Corpus generation failed")
def gen_data(ctx, out, config_file, seed, slides_per_scanner, slide_size, mitoses_per_slide,
             distractors_per_slide, n_jobs):
    """Generate a synthetic five-scanner corpus."""
    started = time.perf_counter()
    cfg = resolve_config(CorpusConfig, load_config_file(config_file, 'gen-data'), {
        'corpus_seed': seed, 'slides_per_scanner': slides_per_scanner, 'slide_size': slide_size,
        'mitoses_per_slide': mitoses_per_slide, 'distractors_per_slide': distractors_per_slide, 'n_jobs': n_jobs,
    })
    corpus = generate_corpus(cfg)
    root = write_corpus(corpus, out)
    manifest = RunManifest('gen-data', cfg.model_dump(mode='json'), cfg.corpus_seed,
                           artifacts={'corpus': str(root)})
    # Beside the corpus directory, not inside it
    corpus_root = Path(root).resolve()
    write_manifest(manifest.finish(started), corpus_root.parent, f"{corpus_root.name}.{MANIFEST_FILE}")
    ErrorHandler.safe_execute(lambda: ctx.obj['display'].display_corpus_summary(corpus.summary(), str(root)),
                              error_message="Could not render the corpus summary")
    click.echo(f"Wrote {len(corpus.slides)} slides to {root}")


@cli.command('train-transfer')
@click.option('--out', required=True, type=click.Path(file_okay=False), help="Run directory")
@click.option('--corpus', 'corpus_dir', default=CORPUS_DIR, show_default=True, type=click.Path())
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False))
@click.option('--seed', type=int)
@click.option('--iterations', type=int)
@click.option('--batch-size', type=int)
@click.option('--patch-size', type=int)
@click.option('--n-critic', type=int)
@click.option('--lambda-rec', type=float)
@click.option('--lambda-cls', type=float)
@click.option('--lambda-gp', type=float)
@click.option('--checkpoint-every', type=int)
@click.option('--resume', 'resume_from', type=click.Path(exists=True), help="Checkpoint or run directory")
@click.pass_context
@ErrorHandler.handle_gracefully("Transfer training failed")
def train_transfer_cmd(ctx, out, corpus_dir, config_file, seed, iterations, batch_size, patch_size, n_critic,
                       lambda_rec, lambda_cls, lambda_gp, checkpoint_every, resume_from):
    """Stage one: train the multi-scanner style transfer module."""
    started = time.perf_counter()
    cfg = resolve_config(TransferConfig, load_config_file(config_file, 'train-transfer'), {
        'seed': seed, 'iterations': iterations, 'batch_size': batch_size, 'patch_size': patch_size,
        'n_critic': n_critic, 'lambda_rec': lambda_rec, 'lambda_cls': lambda_cls, 'lambda_gp': lambda_gp,
        'checkpoint_every': checkpoint_every,
    })
    corpus = load_corpus(corpus_dir)
    resume = None
    if resume_from:
        resume = load_checkpoint(checkpoint_path(resume_from), 'transfer')
        check_resume(resume, cfg.model_dump(mode='json'), resume_from)

    out = Path(out)
    result = train_transfer(cfg, corpus, resume=resume, progress=not ctx.obj['quiet'],
                            on_checkpoint=lambda r: save_run(out, r.to_checkpoint()))
    save_run(out, result.to_checkpoint())
    manifest = RunManifest('train-transfer', cfg.model_dump(mode='json'), cfg.seed,
                           artifacts={'checkpoint': str(out / CHECKPOINT_FILE), 'history': str(out / HISTORY_FILE)},
                           inputs={'corpus': str(corpus_dir), **({'resume': str(resume_from)} if resume_from else {})})
    write_manifest(manifest.finish(started), out)
    ErrorHandler.safe_execute(
        lambda: ctx.obj['display'].display_training_summary("Transfer", result.history, str(out / CHECKPOINT_FILE)),
        error_message="Could not render the training summary")


@cli.command('train-detector')
@click.option('--out', required=True, type=click.Path(file_okay=False), help="Run directory")
@click.option('--corpus', 'corpus_dir', default=CORPUS_DIR, show_default=True, type=click.Path())
@click.option('--transfer', 'transfer_from', type=click.Path(), help="Transfer checkpoint or run directory")
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False))
@click.option('--seed', type=int)
@click.option('--style-prob', type=float, help="Probability of restyling a training patch")
@click.option('--bg-fg-ratio', type=float, help="Expected background:foreground patch ratio")
@click.option('--background-only', is_flag=True, help="Sample background patches only")
@click.option('--iterations', type=int)
@click.option('--batch-size', type=int)
@click.option('--patch-size', type=int)
@click.option('--lr-start', type=float)
@click.option('--checkpoint-every', type=int)
@click.option('--resume', 'resume_from', type=click.Path(exists=True), help="Checkpoint or run directory")
@click.pass_context
@ErrorHandler.handle_gracefully("Detector training failed")
def train_detector_cmd(ctx, out, corpus_dir, transfer_from, config_file, seed, style_prob, bg_fg_ratio,
                       background_only, iterations, batch_size, patch_size, lr_start, checkpoint_every, resume_from):
    """Stage two: train the detector on style-augmented patches."""
    started = time.perf_counter()
    cfg = resolve_config(TrainConfig, load_config_file(config_file, 'train-detector'), {
        'seed': seed, 'style_prob': style_prob, 'bg_fg_ratio': bg_fg_ratio, 'background_only': background_only or None,
        'iterations': iterations, 'batch_size': batch_size, 'patch_size': patch_size, 'lr_start': lr_start,
        'checkpoint_every': checkpoint_every,
    })
    corpus = load_corpus(corpus_dir)
    generator = None
    if transfer_from:
        generator, _, _ = load_transfer_models(load_checkpoint(checkpoint_path(transfer_from), 'transfer'))
    resume = None
    if resume_from:
        resume = load_checkpoint(checkpoint_path(resume_from), 'detector')
        check_resume(resume, cfg.model_dump(mode='json'), resume_from)

    out = Path(out)
    result = train_detector(corpus, generator, cfg, resume=resume, progress=not ctx.obj['quiet'],
                            on_checkpoint=lambda r: save_run(out, r.to_checkpoint()))
    save_run(out, result.to_checkpoint())
    inputs = {'corpus': str(corpus_dir)}
    if transfer_from:
        inputs['transfer'] = str(transfer_from)
    if resume_from:
        inputs['resume'] = str(resume_from)
    manifest = RunManifest('train-detector', cfg.model_dump(mode='json'), cfg.seed,
                           artifacts={'checkpoint': str(out / CHECKPOINT_FILE), 'history': str(out / HISTORY_FILE)},
                           inputs=inputs)
    write_manifest(manifest.finish(started), out)
    ErrorHandler.safe_execute(
        lambda: ctx.obj['display'].display_training_summary("Detector", result.history, str(out / CHECKPOINT_FILE)),
        error_message="Could not render the training summary")


def eval_overrides(score_threshold, **extra) -> Dict:
    return {'score_threshold': score_threshold, **extra}


@cli.command('infer')
@click.option('--model', 'model_from', required=True, type=click.Path(exists=True),
              help="Detector checkpoint or run directory")
@click.option('--out', required=True, type=click.Path(file_okay=False), help="Run directory")
@click.option('--corpus', 'corpus_dir', default=CORPUS_DIR, show_default=True, type=click.Path())
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False))
@click.option('--scanner', 'scanners', type=int, multiple=True, help="Restrict to these scanners (repeatable)")
@click.option('--score-threshold', type=float)
@click.option('--nms-iou', type=float)
@click.option('--tile-overlap', type=int)
@click.pass_context
@ErrorHandler.handle_gracefully("Inference failed")
def infer_cmd(ctx, model_from, out, corpus_dir, config_file, scanners, score_threshold, nms_iou, tile_overlap):
    """Detect mitoses on every slide of the corpus."""
    started = time.perf_counter()
    model, train_cfg = load_detector(load_checkpoint(checkpoint_path(model_from), 'detector'))
    cfg = resolve_config(EvalConfig, load_config_file(config_file, 'infer'), eval_overrides(
        score_threshold, nms_iou=nms_iou, tile_overlap=tile_overlap, patch_size=train_cfg.patch_size))
    corpus = load_corpus(corpus_dir, scanners)
    predictions = infer_corpus(model, corpus, cfg, progress=not ctx.obj['quiet'])
    out = Path(out)
    path = write_predictions(predictions, out / PREDICTIONS_FILE)
    manifest = RunManifest('infer', cfg.model_dump(mode='json'), train_cfg.seed, artifacts={'predictions': str(path)},
                           inputs={'model': str(model_from), 'corpus': str(corpus_dir),
                                   'scanners': ','.join(map(str, scanners))})
    write_manifest(manifest.finish(started), out)
    click.echo(f"Wrote {sum(len(d) for d in predictions.values())} detections on {len(predictions)} slides to {path}")


@cli.command('eval')
@click.option('--predictions', 'predictions_file', required=True, type=click.Path())
@click.option('--corpus', 'corpus_dir', default=CORPUS_DIR, show_default=True, type=click.Path())
@click.option('--out', type=click.Path(file_okay=False), help="Directory for report.json")
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False))
@click.option('--scanner', 'scanners', type=int, multiple=True, help="Restrict to these scanners (repeatable)")
@click.option('--score-threshold', type=float)
@click.option('--match-radius', type=float)
@click.option('--show-slides', is_flag=True, help="Also print per-slide rows")
@click.pass_context
@ErrorHandler.handle_gracefully("Evaluation failed")
def eval_cmd(ctx, predictions_file, corpus_dir, out, config_file, scanners, score_threshold, match_radius,
             show_slides):
    """Precision, recall and F1 of a predictions file against the corpus annotations."""
    started = time.perf_counter()
    cfg = resolve_config(EvalConfig, load_config_file(config_file, 'eval'),
                         eval_overrides(score_threshold, match_radius=match_radius))
    corpus = load_corpus(corpus_dir)
    predictions = read_predictions(predictions_file)
    selected = corpus.filter(scanners) if scanners else corpus
    known = set(corpus.by_id())
    selected_ids = set(selected.by_id())
    # Slides outside the scanner filter are dropped, slides outside the corpus are errors
    predictions = {k: v for k, v in predictions.items() if k in selected_ids or k not in known}
    report = evaluate(predictions, ground_truth_of(selected), cfg, scanners_of(selected))

    click.echo(f"precision {report.precision:.4f}  recall {report.recall:.4f}  f1 {report.f1:.4f}  "
               f"(tp {report.tp}, fp {report.fp}, fn {report.fn})")
    ctx.obj['display'].display_eval_report(report, show_slides)
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        display = ctx.obj['display']
        (out / REPORT_FILE).write_text(display.generate_json_export(report))
        (out / REPORT_TEXT_FILE).write_text(display.generate_text_report(report))
        manifest = RunManifest('eval', cfg.model_dump(mode='json'), None,
                               artifacts={'report': str(out / REPORT_FILE), 'text_report': str(out / REPORT_TEXT_FILE)},
                               inputs={'predictions': str(predictions_file), 'corpus': str(corpus_dir),
                                       'scanners': ','.join(map(str, scanners))})
        write_manifest(manifest.finish(started), out)


@cli.command('eval-transfer')
@click.option('--transfer', 'transfer_from', required=True, type=click.Path(exists=True),
              help="Transfer checkpoint or run directory")
@click.option('--corpus', 'corpus_dir', default=CORPUS_DIR, show_default=True, type=click.Path())
@click.option('--num-patches', type=int, default=256, show_default=True)
@click.option('--classifier-iterations', type=int, default=600, show_default=True)
@click.option('--seed', type=int, default=4321, show_default=True)
@click.option('--out', type=click.Path(file_okay=False),
              help="Directory for transfer_report.json and transfer_gallery.png")
@click.pass_context
@ErrorHandler.handle_gracefully("Transfer evaluation failed")
def eval_transfer_cmd(ctx, transfer_from, corpus_dir, num_patches, classifier_iterations, seed, out):
    """Held-out cycle L1 and target-scanner accuracy of a transfer module."""
    started = time.perf_counter()
    generator, _, cfg = load_transfer_models(load_checkpoint(checkpoint_path(transfer_from), 'transfer'))
    corpus = load_corpus(corpus_dir)
    report = evaluate_transfer(generator, corpus, cfg, num_patches, classifier_iterations, seed)
    click.echo(f"cycle_l1 {report.cycle_l1:.4f}  target_accuracy {report.target_accuracy:.3f}")
    ctx.obj['display'].display_transfer_report(report)
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / TRANSFER_REPORT_FILE
        path.write_text(json.dumps(report.to_dict(), indent=2))
        gallery = write_gallery(transfer_gallery(generator, corpus, cfg, seed), out / TRANSFER_GALLERY_FILE)
        manifest = RunManifest('eval-transfer', cfg.model_dump(mode='json'), seed,
                               artifacts={'report': str(path), 'gallery': str(gallery)},
                               inputs={'transfer': str(transfer_from), 'corpus': str(corpus_dir)})
        write_manifest(manifest.finish(started), out)


def main():
    cli(prog_name='mitosis')


if __name__ == "__main__":
    main()
