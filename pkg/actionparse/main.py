"""
Action-tree parsing toolkit command line
Generates template corpora, trains and evaluates parsers, and parses sentences
"""

import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
import pandas as pd
import structlog
from pydantic import ValidationError

from config import VARIANTS, RunConfig, resolve_run_config
from services.corpus_service import (
    Example,
    ExampleSource,
    MixedSampler,
    action_frequency_stats,
    apply_rephrases,
    filter_annotations,
    load_distribution,
    read_annotation_triples,
    read_examples,
    read_rephrase_annotations,
    shared_distribution,
    write_examples,
)
from services.evaluation_service import evaluate_pairs
from services.grammar_service import GrammarSchema, load_schema, serialize_tree
from services.parser_service import (
    ParserModel,
    beam_decode,
    decode_corpus,
    greedy_decode_with_probabilities,
)
from services.report_service import ReportService
from services.template_service import generate_splits, load_noop_corpus, load_template_library
from services.training_service import MODEL_FILE, STATE_FILE, ParserTrainer
from utils.errors import ActionParseError
from utils.logging_config import setup_logging
from utils.tokenizer import tokenize

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


def _config(ctx: click.Context, **overrides: Any) -> RunConfig:
    try:
        return resolve_run_config(ctx.obj.get("config_file"), overrides)
    except ValidationError as e:
        raise click.UsageError(f"Invalid configuration: {e}")


def _schema(config: RunConfig) -> GrammarSchema:
    return load_schema(config.schema_path)


def _header(config: RunConfig, **fields: Any) -> Dict[str, Any]:
    return {"config_digest": config.digest(), "seed": config.seed, **fields}


@click.group()
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="JSON file with run configuration fields.")
@click.option("--log-level", default=None, help="Log level (DEBUG, INFO, WARNING, ERROR).")
@click.option("--log-format", type=click.Choice(["console", "json"]), default=None, help="Log renderer.")
@click.pass_context
def cli(ctx: click.Context, config_file: Optional[Path], log_level: Optional[str],
        log_format: Optional[str]) -> None:
    """Generate corpora, train and evaluate action-tree parsers, and parse sentences."""
    setup_logging(log_level, log_format)
    ctx.ensure_object(dict)
    ctx.obj["config_file"] = config_file


@cli.command()
@click.option("--train", "train_size", type=click.IntRange(min=1), default=None)
@click.option("--valid", "valid_size", type=click.IntRange(min=1), default=None)
@click.option("--test", "test_size", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--noop-fraction", type=click.FloatRange(0.0, 1.0), default=None)
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
def generate(ctx: click.Context, **options: Any) -> None:
    """Write train/valid/test template corpora and print the action histogram."""
    config = _config(ctx, **options)
    schema = _schema(config)
    library = load_template_library(config.library_path, schema, seed=config.seed)
    noop_corpus = load_noop_corpus(config.noop_corpus_path) if config.noop_corpus_path else None

    splits = generate_splits(library, noop_corpus, (config.train_size, config.valid_size, config.test_size),
                             config.noop_fraction, config.seed, config.output_dir, config.digest())
    histogram = action_frequency_stats(splits["train"], schema)
    stats_path = config.output_dir / "stats.json"
    with open(stats_path, "w", encoding="utf-8") as f:
        json.dump({**_header(config, split="train"), **histogram.to_dict()}, f, indent=2, sort_keys=True)

    click.echo(histogram.to_series().to_string())
    click.echo(f"total    {histogram.total}")
    logger.info("Corpora generated", output_dir=str(config.output_dir), digest=config.digest())


def _pools(config: RunConfig, schema: GrammarSchema, train_file: Path,
           extra_pools: Sequence[Path]) -> Dict[str, List[Example]]:
    pools = {"templates": read_examples(train_file, schema)}
    for path in extra_pools:
        pools[path.stem] = read_examples(path, schema, ExampleSource.REPHRASE)
    return pools


def _target(config: RunConfig, schema: GrammarSchema, pools: Dict[str, List[Example]]) -> Dict[str, float]:
    if config.distribution_path is not None:
        return load_distribution(config.distribution_path)
    return shared_distribution(pools, schema)


@cli.command()
@click.option("--variant", type=click.Choice(VARIANTS), default=None)
@click.option("--d", "dim", type=click.IntRange(min=1), default=None, help="Model dimension.")
@click.option("--heads", type=click.IntRange(min=1), default=None)
@click.option("--free-dims", type=click.IntRange(min=0), default=None)
@click.option("--steps", type=click.IntRange(min=0), default=None)
@click.option("--batch-size", type=click.IntRange(min=1), default=None)
@click.option("--eval-interval", type=click.IntRange(min=1), default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--embeddings", "embedding_path", type=click.Path(path_type=Path), default=None)
@click.option("--distribution", "distribution_path", type=click.Path(path_type=Path), default=None)
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--train-file", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Template training corpus (default: <output-dir>/train.tsv).")
@click.option("--valid-file", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Validation corpus (default: <output-dir>/valid.tsv).")
@click.option("--pool", "extra_pools", type=click.Path(dir_okay=False, path_type=Path), multiple=True,
              help="Additional training pool, alternated with the templates.")
@click.option("--resume", is_flag=True, help="Continue from <output-dir>/trainer_state.npz.")
@click.pass_context
def train(ctx: click.Context, train_file: Optional[Path], valid_file: Optional[Path],
          extra_pools: Sequence[Path], resume: bool, **options: Any) -> None:
    """Train a parser and keep the checkpoint with the best validation accuracy."""
    config = _config(ctx, **options)
    schema = _schema(config)
    output_dir = config.output_dir
    pools = _pools(config, schema, train_file or output_dir / "train.tsv", extra_pools)
    valid = read_examples(valid_file or output_dir / "valid.tsv", schema)
    sampler = MixedSampler(pools, _target(config, schema, pools), schema, config.seed)

    state_path = output_dir / STATE_FILE
    if resume:
        trainer = ParserTrainer.resume(state_path, schema, sampler, valid, config.hyper, output_dir)
    else:
        vocabulary = {t for pool in pools.values() for e in pool for t in e.tokens}
        model = ParserModel.build(schema, sorted(vocabulary), config.hyper, config.variant, config.seed,
                                  embedding_path=config.embedding_path)
        trainer = ParserTrainer(model, sampler, valid, config.hyper, config.seed, output_dir)

    result = trainer.run(config.hyper.steps)
    result.model.save(output_dir / MODEL_FILE, metadata={
        **_header(config), "best_step": result.best_step, "best_accuracy": result.best_accuracy})
    with open(output_dir / "curve.json", "w", encoding="utf-8") as f:
        json.dump({**_header(config), "curve": result.to_frame().to_dict(orient="records")}, f, indent=2)
    click.echo(result.to_frame().to_string(index=False))
    click.echo(f"best validation accuracy {result.best_accuracy:.4f} at step {result.best_step}")


@cli.command(name="eval")
@click.option("--checkpoint", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--corpus", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--beam", "beam_width", type=click.IntRange(min=1), default=None)
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
def evaluate(ctx: click.Context, checkpoint: Optional[Path], corpus: Optional[Path], **options: Any) -> None:
    """Decode a corpus and report accuracy, node P/R/F1 and confusion tables."""
    config = _config(ctx, **options)
    schema = _schema(config)
    output_dir = config.output_dir
    model = ParserModel.load(checkpoint or output_dir / MODEL_FILE, schema)
    examples = read_examples(corpus or output_dir / "test.tsv", schema)
    width = config.hyper.beam_width

    predictions = decode_corpus(model, [e.tokens for e in examples], width)
    metrics, tables = evaluate_pairs(list(zip(predictions, [e.tree for e in examples])), schema)

    extra: Dict[str, Any] = {"beam_width": width}
    if width > 1:
        monotone = 0
        for example in examples:
            greedy_score = beam_decode(model, example.tokens, 1)[0][1]
            beam_score = beam_decode(model, example.tokens, width)[0][1]
            monotone += beam_score >= greedy_score
        extra["beam_monotone_fraction"] = monotone / len(examples)
        logger.info("Beam score check", width=width, monotone_fraction=extra["beam_monotone_fraction"])

    service = ReportService(output_dir)
    service.write(metrics, tables, config.digest(), extra)
    click.echo(service.render_text(metrics, tables, config.digest()))


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--input", "input_file", type=click.File("r", encoding="utf-8"), default="-",
              help="Sentences, one per line (default: standard input).")
@click.option("--probs", "probs_file", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Write per-node probabilities as JSON lines to this file.")
@click.option("--beam", "beam_width", type=click.IntRange(min=1), default=None)
@click.pass_context
def parse(ctx: click.Context, checkpoint: Optional[Path], input_file: Any, probs_file: Optional[Path],
          **options: Any) -> None:
    """Print one canonical tree document per input sentence."""
    config = _config(ctx, **options)
    schema = _schema(config)
    model = ParserModel.load(checkpoint or config.output_dir / MODEL_FILE, schema)
    width = config.hyper.beam_width
    sidecar = open(probs_file, "w", encoding="utf-8") if probs_file else None
    try:
        for line_number, line in enumerate(input_file, start=1):
            tokens = tokenize(line)
            if not tokens:
                logger.warning("Skipping empty line", line_number=line_number)
                continue
            if width == 1:
                tree, probabilities = greedy_decode_with_probabilities(model, tokens)
            else:
                tree, probabilities = beam_decode(model, tokens, width)[0][0], {}
            click.echo(serialize_tree(tree, schema))
            if sidecar is not None:
                sidecar.write(json.dumps({"config_digest": config.digest(), "sentence": " ".join(tokens),
                                          "probabilities": probabilities}) + "\n")
    finally:
        if sidecar is not None:
            sidecar.close()


@cli.command()
@click.argument("corpora", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.pass_context
def stats(ctx: click.Context, corpora: Sequence[Path]) -> None:
    """Print the action-type histogram of one or more corpora."""
    config = _config(ctx)
    schema = _schema(config)
    columns = {}
    for path in corpora:
        columns[path.name] = action_frequency_stats(read_examples(path, schema), schema).to_series()
    frame = pd.DataFrame(columns).fillna(0).astype(int)
    fractions = frame / frame.sum()
    click.echo(frame.to_string())
    click.echo()
    click.echo(fractions.to_string(float_format=lambda v: f"{v:.4f}"))


@cli.command()
@click.argument("annotations", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("output", type=click.Path(dir_okay=False, path_type=Path))
@click.pass_context
def rephrase(ctx: click.Context, annotations: Path, output: Path) -> None:
    """Turn rephrase annotations into a corpus with remapped spans."""
    config = _config(ctx)
    schema = _schema(config)
    examples = apply_rephrases(read_rephrase_annotations(annotations, schema), schema)
    count = write_examples(examples, output, schema, _header(config, source="rephrase"))
    click.echo(f"{count} rephrased examples written to {output}")


@cli.command()
@click.argument("annotations", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("output", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--source", type=click.Choice(["prompt", "interactive"]), default="prompt")
@click.pass_context
def agree(ctx: click.Context, annotations: Path, output: Path, source: str) -> None:
    """Keep sentences on which at least two of three annotators agree."""
    config = _config(ctx)
    schema = _schema(config)
    triples = read_annotation_triples(annotations, schema)
    examples = filter_annotations(triples, ExampleSource(source))
    count = write_examples(examples, output, schema, _header(config, source=source))
    click.echo(f"{count} of {len(triples)} annotated sentences kept in {output}")


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run the command line and map failures to exit codes

    Returns:
        0 on success, 1 on usage errors, 2 on data errors
    """
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="actionparse",
                          standalone_mode=False)
        return result if isinstance(result, int) else EXIT_OK
    except click.exceptions.Abort:
        click.echo("Aborted.", err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except (ActionParseError, OSError, ValueError) as e:
        logger.error("Command failed", error=str(e))
        click.echo(f"Error: {e}", err=True)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(run())
