import dataclasses
import logging

import click

from config import Config
from reportgen.cli.commands.common import handle_errors, write_manifest
from reportgen.core import synth as synth_data
from reportgen.core.labeler import default_ontology, load_ontology
from reportgen.core.tokenizer import BpeTokenizer
from reportgen.models import GeneratorConfig

logger = logging.getLogger(__name__)


@click.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="GeneratorConfig JSON; defaults apply to missing keys.")
@click.option("--out", required=True, type=click.Path(), help="Dataset JSON-lines file to write.")
@click.option("--seed", type=int, default=None, help="Overrides the configured seed.")
@click.option("--ontology", "ontology_path", type=click.Path(), default=None,
              help="Finding ontology JSON-lines; the built-in five findings otherwise.")
@click.option("--ratios", nargs=3, type=float, default=(0.8, 0.1, 0.1), show_default=True,
              help="Train, validate and test fractions.")
@handle_errors
def synth(config_path, out, seed, ontology_path, ratios):
    """Generate a synthetic (feature grid, report, labels) dataset."""
    config = GeneratorConfig.from_json(config_path, base=GeneratorConfig()) if config_path else GeneratorConfig()
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    ontology = load_ontology(ontology_path) if ontology_path else default_ontology()

    samples = synth_data.generate(config, ontology)
    train, validate, test = synth_data.split(samples, ratios, seed=config.seed)
    synth_data.save_dataset(out, samples)

    write_manifest(out, seed=config.seed, config=config_path)
    logger.info(f"Wrote {len(samples)} samples ({len(train)}/{len(validate)}/{len(test)}) to {out}")


@click.command()
@click.option("--dataset", required=True, type=click.Path(), help="Dataset JSON-lines file.")
@click.option("--vocab-size", type=int, default=Config.VOCAB_SIZE, show_default=True,
              help="Target vocabulary size, reserved tokens included.")
@click.option("--out", required=True, type=click.Path(), help="Vocab file to write.")
@handle_errors
def tokenize(dataset, vocab_size, out):
    """Train the BPE tokenizer on the training reports."""
    samples = synth_data.load_dataset(dataset)
    corpus = [sample.report for sample in samples if sample.split == "train"] or [s.report for s in samples]

    tokenizer = BpeTokenizer.train(corpus, vocab_size)
    tokenizer.save(out)

    write_manifest(out, dataset=dataset)
    logger.info(f"Wrote a {len(tokenizer)}-token vocab to {out}")
