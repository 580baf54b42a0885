import logging

import click

from reportgen.cli.commands.common import handle_errors, write_json, write_manifest
from reportgen.core.labeler import classification_report, default_ontology, label_report, load_ontology
from reportgen.core.metrics import evaluate_pairs, load_predictions

logger = logging.getLogger(__name__)


def score_predictions(pairs, ontology):
    """
    Both halves of the evaluation: caption metrics and surrogate label classification.

    Reference labels are the union of the labels found in a pair's references.
    """
    summary = evaluate_pairs(pairs)
    predicted = [label_report(pair.candidate, ontology) for pair in pairs]
    truth = [set().union(*(label_report(ref, ontology) for ref in pair.references)) for pair in pairs]
    report = classification_report(predicted, truth, ontology.ids)
    summary["per_finding"] = report["per_finding"]
    summary["accuracy"] = report["accuracy"]
    return summary


@click.command()
@click.option("--predictions", required=True, type=click.Path(), help="Predictions JSON-lines from `generate`.")
@click.option("--ontology", "ontology_path", type=click.Path(), default=None,
              help="Finding ontology JSON-lines; the built-in five findings otherwise.")
@click.option("--out", required=True, type=click.Path(), help="Metrics JSON file to write.")
@handle_errors
def evaluate(predictions, ontology_path, out):
    """Score predictions with BLEU, ROUGE-L, CIDEr-D and per-finding classification."""
    ontology = load_ontology(ontology_path) if ontology_path else default_ontology()
    summary = score_predictions(load_predictions(predictions), ontology)
    write_json(out, summary)

    write_manifest(out, config=ontology_path, dataset=predictions)
    for finding_id, scores in summary["per_finding"].items():
        logger.info(f"{finding_id}: P={scores['precision']:.3f} R={scores['recall']:.3f} F1={scores['f1']:.3f}")
