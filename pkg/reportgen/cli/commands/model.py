import dataclasses
import json
import logging
import os

import click

from config import PRESETS
from errors import ConfigError, IdRangeError
from reportgen.cli.commands.common import handle_errors, write_json, write_manifest
from reportgen.core import decoder as greedy
from reportgen.core.checkpoint import load_checkpoint
from reportgen.core.plotting import render_attention_panels
from reportgen.core.synth import load_dataset
from reportgen.core.tokenizer import BpeTokenizer
from reportgen.core.trainer import Trainer, attach_token_ids
from reportgen.models import ModelConfig, TrainConfig

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "config.json"


def _resolve_configs(preset, tokenizer, grid, model_config_path, train_config_path):
    preset_class = PRESETS[preset]
    model_config = ModelConfig.from_object(preset_class, vocab_size=len(tokenizer), image_grid=grid)
    if model_config_path:
        model_config = ModelConfig.from_json(model_config_path, base=model_config)
    if model_config.vocab_size != len(tokenizer):
        raise ConfigError(f"model vocab_size {model_config.vocab_size} differs from the {len(tokenizer)}-token vocab")

    train_config = TrainConfig.from_object(preset_class)
    if train_config_path:
        train_config = TrainConfig.from_json(train_config_path, base=train_config)
    return model_config, train_config


@click.command()
@click.option("--dataset", required=True, type=click.Path(), help="Dataset JSON-lines file.")
@click.option("--vocab", required=True, type=click.Path(), help="Vocab file from `tokenize`.")
@click.option("--model-config", "model_config_path", type=click.Path(), default=None,
              help="ModelConfig JSON layered over the preset.")
@click.option("--train-config", "train_config_path", type=click.Path(), default=None,
              help="TrainConfig JSON layered over the preset.")
@click.option("--out-dir", required=True, type=click.Path(), help="Directory for checkpoints and the log.")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="desk", show_default=True,
              help="Hyper-parameter preset.")
@click.option("--epochs", type=int, default=None, help="Overrides the configured epoch count.")
@click.option("--seed", type=int, default=None, help="Overrides the configured seed.")
@click.option("--no-clip", is_flag=True, help="Disable gradient-norm clipping.")
@click.option("--select-best", is_flag=True, help="Keep the epoch with the lowest validation loss.")
@click.option("--no-image-pe", is_flag=True, help="Do not add positional encodings to the image sequence.")
@handle_errors
def train(dataset, vocab, model_config_path, train_config_path, out_dir, preset, epochs, seed, no_clip,
          select_best, no_image_pe):
    """Train the report decoder with teacher forcing."""
    tokenizer = BpeTokenizer.load(vocab)
    samples = load_dataset(dataset)
    train_samples = [s for s in samples if s.split == "train"]
    validation_samples = [s for s in samples if s.split == "validate"]
    grid = train_samples[0].image.shape if train_samples else ModelConfig().image_grid

    model_config, train_config = _resolve_configs(preset, tokenizer, grid, model_config_path, train_config_path)
    if no_image_pe:
        model_config = dataclasses.replace(model_config, image_positional_encoding=False)
    overrides = {"epochs": epochs, "seed": seed}
    train_config = dataclasses.replace(train_config, **{k: v for k, v in overrides.items() if v is not None})
    if no_clip:
        train_config = dataclasses.replace(train_config, clip_norm=None)
    if select_best:
        train_config = dataclasses.replace(train_config, select_best=True)

    attach_token_ids(train_samples + validation_samples, tokenizer, model_config.max_len)

    os.makedirs(out_dir, exist_ok=True)
    resolved = os.path.join(out_dir, RESOLVED_CONFIG_NAME)
    write_json(resolved, {"model": model_config.to_dict(), "train": train_config.to_dict()})

    result = Trainer(model_config, train_config, out_dir=out_dir).fit(train_samples, validation_samples)

    write_manifest(resolved, seed=train_config.seed, vocab=vocab, dataset=dataset)
    for artifact in result.artifacts:
        write_manifest(artifact, seed=train_config.seed, config=resolved, vocab=vocab, dataset=dataset)
    logger.info(f"Wrote {len(result.artifacts) + 1} training artifacts to {out_dir}")


@click.command()
@click.option("--checkpoint", required=True, type=click.Path(), help="Checkpoint file.")
@click.option("--vocab", required=True, type=click.Path(), help="Vocab file.")
@click.option("--dataset", required=True, type=click.Path(), help="Dataset JSON-lines file.")
@click.option("--split", "split_name", type=click.Choice(["train", "validate", "test"]), default="test",
              show_default=True, help="Which split to generate for.")
@click.option("--out", required=True, type=click.Path(), help="Predictions JSON-lines file to write.")
@click.option("--workers", type=int, default=1, show_default=True, help="Concurrent generation sessions.")
@handle_errors
def generate(checkpoint, vocab, dataset, split_name, out, workers):
    """Greedily generate a report for every sample of a split."""
    params, model_config = load_checkpoint(checkpoint)
    tokenizer = BpeTokenizer.load(vocab)
    samples = [s for s in load_dataset(dataset) if s.split == split_name]

    results = greedy.generate_many([s.image for s in samples], params, model_config, tokenizer, workers=workers)
    with open(out, "w", encoding="utf-8", newline="\n") as handle:
        for sample, result in zip(samples, results):
            record = {
                "id": sample.id,
                "candidate": result.text,
                "references": [sample.report],
                "token_ids": result.token_ids,
            }
            handle.write(json.dumps(record) + "\n")

    write_manifest(out, checkpoint=checkpoint, vocab=vocab, dataset=dataset)
    logger.info(f"Wrote {len(results)} {split_name} predictions to {out}")


@click.command()
@click.option("--checkpoint", required=True, type=click.Path(), help="Checkpoint file.")
@click.option("--vocab", required=True, type=click.Path(), help="Vocab file.")
@click.option("--dataset", required=True, type=click.Path(), help="Dataset JSON-lines file.")
@click.option("--sample-id", required=True, help="Id of the sample to explain.")
@click.option("--out", required=True, type=click.Path(), help="Attention dump file to write.")
@click.option("--png", type=click.Path(), default=None, help="Also render per-token heat-map panels.")
@click.option("--all-layers", is_flag=True, help="Dump every decoder layer, not just the last.")
@handle_errors
def attention(checkpoint, vocab, dataset, sample_id, out, png, all_layers):
    """Dump per-token cross-attention maps for one generated report."""
    params, model_config = load_checkpoint(checkpoint)
    tokenizer = BpeTokenizer.load(vocab)
    matches = [s for s in load_dataset(dataset) if s.id == sample_id]
    if not matches:
        raise IdRangeError(f"no sample with id {sample_id!r}", path=dataset)

    result = greedy.greedy_generate(
        matches[0].image, params, model_config, tokenizer, trace_layers="all" if all_layers else "last"
    )
    tokens = tokenizer.tokens(result.token_ids)
    manifest = write_manifest(out, checkpoint=checkpoint, vocab=vocab, dataset=dataset)
    greedy.write_attention_dump(out, result.text, tokens, result.trace, manifest=manifest.to_dict())

    if png:
        render_attention_panels(png, tokens, result.trace.maps)
        write_manifest(png, checkpoint=checkpoint, vocab=vocab, dataset=dataset)
    logger.info(f"Wrote {len(result.trace)} attention maps for {sample_id} to {out}")
