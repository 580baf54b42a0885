"""
Rule-based finding extraction and the classification scores built on it.

A finding is positive when one of its mention phrases occurs in the report and
no negation cue precedes that mention within `NEGATION_WINDOW` tokens of the
same sentence.
"""
import json
import logging
from dataclasses import dataclass, field

from errors import FileFormatError, LayoutError, LengthMismatchError, MissingPathError
from reportgen.core.metrics import tokenize

logger = logging.getLogger(__name__)

NEGATION_WINDOW = 4
NEGATION_CUES = (("no",), ("without",), ("free", "of"), ("negative", "for"))
SENTENCE_BOUNDARY = "."
NORMAL_SENTENCE = "no acute cardiopulmonary process."


@dataclass(frozen=True)
class Finding:
    """
    One entry of the finding ontology.

    Attributes:
        id (str): Stable identifier, e.g. `pleural_effusion`.
        name (str): Human readable name.
        phrases (tuple): Mention phrases, matched as whole token sequences.
        negation_sensitive (bool): Whether a preceding negation cue cancels a mention.
        templates (tuple): Report sentences the synthetic generator may emit.
    """
    id: str
    name: str
    phrases: tuple
    negation_sensitive: bool = True
    templates: tuple = ()
    phrase_tokens: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "phrases", tuple(self.phrases))
        object.__setattr__(self, "templates", tuple(self.templates))
        object.__setattr__(self, "phrase_tokens", tuple(tuple(tokenize(p)) for p in self.phrases))

    def to_dict(self):
        return {
            "id": self.id,
            "name": self.name,
            "phrases": list(self.phrases),
            "negation_sensitive": self.negation_sensitive,
            "templates": list(self.templates),
        }


class FindingOntology:
    """
    Ordered collection of findings with non-empty, mutually disjoint phrase lists.

    Raises:
        LayoutError: If a finding has no phrases, an id repeats, or a phrase is shared.
    """

    def __init__(self, findings):
        self.findings = tuple(findings)
        owners = {}
        for finding in self.findings:
            if not finding.phrases or not all(finding.phrase_tokens):
                raise LayoutError(f"finding {finding.id} needs at least one non-empty phrase")
            for phrase in finding.phrase_tokens:
                if phrase in owners and owners[phrase] != finding.id:
                    raise LayoutError(f"phrase {' '.join(phrase)!r} is shared by {owners[phrase]} and {finding.id}")
                owners[phrase] = finding.id
        if len({f.id for f in self.findings}) != len(self.findings):
            raise LayoutError("finding ids must be unique")

    def __iter__(self):
        return iter(self.findings)

    def __len__(self):
        return len(self.findings)

    def __getitem__(self, finding_id):
        for finding in self.findings:
            if finding.id == finding_id:
                return finding
        raise KeyError(finding_id)

    @property
    def ids(self):
        return tuple(f.id for f in self.findings)


def default_ontology():
    """The five synthetic findings shared by the generator and the labeler."""
    return FindingOntology([
        Finding(
            id="cardiomegaly",
            name="Cardiomegaly",
            phrases=("cardiomegaly", "enlarged cardiac silhouette", "heart size is enlarged"),
            templates=(
                "there is moderate cardiomegaly.",
                "enlarged cardiac silhouette is seen.",
                "the heart size is enlarged.",
            ),
        ),
        Finding(
            id="edema",
            name="Edema",
            phrases=("pulmonary edema", "vascular congestion", "interstitial edema"),
            templates=(
                "mild pulmonary edema is present.",
                "there is vascular congestion.",
                "interstitial edema is noted.",
            ),
        ),
        Finding(
            id="consolidation",
            name="Consolidation",
            phrases=("consolidation", "airspace opacity", "focal opacity"),
            templates=(
                "there is right lower lobe consolidation.",
                "an airspace opacity is seen.",
                "focal opacity in the left base.",
            ),
        ),
        Finding(
            id="atelectasis",
            name="Atelectasis",
            phrases=("atelectasis", "volume loss", "linear opacities"),
            templates=(
                "bibasilar atelectasis is present.",
                "there is volume loss at the bases.",
                "linear opacities at the lung bases.",
            ),
        ),
        Finding(
            id="pleural_effusion",
            name="Pleural Effusion",
            phrases=("pleural effusion", "effusion", "blunting of the costophrenic angles"),
            templates=(
                "small left pleural effusion.",
                "a right effusion is present.",
                "blunting of the costophrenic angles.",
            ),
        ),
    ])


def _occurrences(tokens, phrase):
    width = len(phrase)
    return [i for i in range(len(tokens) - width + 1) if tuple(tokens[i:i + width]) == phrase]


def _negated(tokens, start):
    sentence_start = 0
    for i in range(start - 1, -1, -1):
        if tokens[i] == SENTENCE_BOUNDARY:
            sentence_start = i + 1
            break
    window_start = max(sentence_start, start - NEGATION_WINDOW)
    for cue in NEGATION_CUES:
        for i in range(window_start, start - len(cue) + 1):
            if tuple(tokens[i:i + len(cue)]) == cue:
                return True
    return False


def label_report(text, ontology):
    """
    Extracts the positive findings of a report.

    Args:
        text (str): Report text; matching is case-insensitive.
        ontology (FindingOntology): Findings and their phrases.

    Returns:
        set[str]: Ids of findings with at least one non-negated mention.
    """
    tokens = tokenize(text)
    positives = set()
    for finding in ontology:
        for phrase in finding.phrase_tokens:
            if any(not (finding.negation_sensitive and _negated(tokens, start)) for start in _occurrences(tokens, phrase)):
                positives.add(finding.id)
                break
    return positives


def classification_report(pred_labels, true_labels, finding_ids):
    """
    Per-finding binary precision, recall, F1 and accuracy.

    Args:
        pred_labels (Sequence[Collection[str]]): Predicted label sets, one per sample.
        true_labels (Sequence[Collection[str]]): Reference label sets, aligned with `pred_labels`.
        finding_ids (Sequence[str]): Findings to score.

    Returns:
        dict: `{"per_finding": {id: {precision, recall, f1, accuracy, prevalence, support}}, "accuracy": float}`
        where the overall accuracy is the mean of the per-finding accuracies.

    Raises:
        LengthMismatchError: If the two label lists differ in length.
    """
    if len(pred_labels) != len(true_labels):
        raise LengthMismatchError(f"{len(pred_labels)} predictions against {len(true_labels)} references")

    total = len(true_labels)
    prevalence = class_bias(true_labels, finding_ids)
    per_finding = {}
    for finding_id in finding_ids:
        tp = fp = fn = tn = 0
        for predicted, truth in zip(pred_labels, true_labels):
            p, t = finding_id in predicted, finding_id in truth
            tp += p and t
            fp += p and not t
            fn += t and not p
            tn += not p and not t
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_finding[finding_id] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "accuracy": (tp + tn) / total if total else 0.0,
            "prevalence": prevalence[finding_id],
            "support": tp + fn,
        }

    accuracy = sum(scores["accuracy"] for scores in per_finding.values()) / len(per_finding) if per_finding else 0.0
    return {"per_finding": per_finding, "accuracy": accuracy}


def class_bias(true_labels, finding_ids):
    """Fraction of samples carrying each finding."""
    total = len(true_labels)
    return {
        finding_id: (sum(finding_id in labels for labels in true_labels) / total if total else 0.0)
        for finding_id in finding_ids
    }


def save_ontology(path, ontology):
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for finding in ontology:
            handle.write(json.dumps(finding.to_dict()) + "\n")


def load_ontology(path):
    """
    Reads a JSON-lines ontology of `{id, name, phrases[], negation_sensitive?, templates[]?}` records.

    Raises:
        MissingPathError: If the file does not exist.
        FileFormatError: On a malformed record, naming the line number.
        LayoutError: If phrases are empty or shared between findings.
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.read().splitlines()
    except FileNotFoundError:
        raise MissingPathError(str(path), path=str(path))

    findings = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            findings.append(Finding(
                id=record["id"],
                name=record.get("name", record["id"]),
                phrases=tuple(record["phrases"]),
                negation_sensitive=bool(record.get("negation_sensitive", True)),
                templates=tuple(record.get("templates", ())),
            ))
        except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
            raise FileFormatError(f"line {number}: bad ontology record ({e})", path=str(path), offset=number)

    ontology = FindingOntology(findings)
    logger.debug(f"Loaded {len(ontology)} findings from {path}")
    return ontology
