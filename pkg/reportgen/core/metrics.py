"""
Caption evaluation metrics: corpus BLEU-1..4, ROUGE-L and CIDEr-D.

All metrics share one deterministic tokenizer (lowercase, punctuation split
into standalone tokens) that is independent of the model's BPE vocabulary.
"""
import json
import logging
import math
import re
import warnings

from nltk.translate.bleu_score import corpus_bleu
from pycocoevalcap.cider.cider import Cider
from pycocoevalcap.rouge.rouge import Rouge

from errors import ConfigError, DegenerateIdfError, EmptyCorpusError, FileFormatError, MissingPathError
from reportgen.models import EvalPair

logger = logging.getLogger(__name__)

ROUGE_BETA_SQUARED = 1.2
CIDER_MAX_N = 4
CIDER_SIGMA = 6.0

_TOKEN_PATTERN = re.compile(r"\w+|[^\w\s]")


def tokenize(text):
    return _TOKEN_PATTERN.findall(text.lower())


def _require_pairs(pairs):
    pairs = list(pairs)
    if not pairs:
        raise EmptyCorpusError("no candidate/reference pairs to score")
    return pairs


def bleu_n(pairs, n):
    """
    Corpus BLEU with uniform weights over orders `1..n` and the standard brevity penalty.

    Args:
        pairs (Sequence[EvalPair]): Candidates with their references.
        n (int): Highest n-gram order, 1 to 4.

    Returns:
        float: Score in `[0, 1]`; 0 when some order has no matching n-gram.

    Raises:
        EmptyCorpusError: If `pairs` is empty.
    """
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must lie in 1..4, got {n}")
    pairs = _require_pairs(pairs)

    references = [[tokenize(ref) for ref in pair.references] for pair in pairs]
    hypotheses = [tokenize(pair.candidate) for pair in pairs]
    with warnings.catch_warnings():
        # nltk warns on zero n-gram overlap and still returns 0
        warnings.simplefilter("ignore")
        return float(corpus_bleu(references, hypotheses, weights=(1.0 / n,) * n))


def _joined(text):
    return " ".join(tokenize(text))


def rouge_l_sentence(candidate, references, beta_squared=ROUGE_BETA_SQUARED):
    """Best LCS F-measure of `candidate` against any of `references`."""
    scorer = Rouge()
    scorer.beta = math.sqrt(beta_squared)
    candidate = _joined(candidate)
    if not candidate:
        return 0.0
    # one reference per call, so the maximum is over whole F-measures
    return max((scorer.calc_score([candidate], [ref]) for ref in map(_joined, references) if ref), default=0.0)


def rouge_l(pairs):
    """Mean over the corpus of the per-pair ROUGE-L F-measure."""
    pairs = _require_pairs(pairs)
    return math.fsum(rouge_l_sentence(pair.candidate, pair.references) for pair in pairs) / len(pairs)


class CiderD:
    """
    Consensus-based TF-IDF n-gram similarity with a Gaussian length penalty.

    Document frequencies are counted over the reference set of every pair, so
    an n-gram present in all reference sets has zero IDF and contributes nothing.

    Args:
        max_n (int): Highest n-gram order.
        sigma (float): Width of the length-difference penalty.
    """

    def __init__(self, max_n=CIDER_MAX_N, sigma=CIDER_SIGMA):
        self.scorer = Cider(n=max_n, sigma=sigma)

    def score_pairs(self, pairs):
        """
        Returns:
            list[float]: One CIDEr-D score per pair.

        Raises:
            EmptyCorpusError: If `pairs` is empty.
            DegenerateIdfError: If fewer than two distinct reference documents exist.
        """
        pairs = _require_pairs(pairs)
        if len({tuple(sorted(pair.references)) for pair in pairs}) < 2:
            raise DegenerateIdfError("CIDEr needs at least two distinct reference documents")

        references = {index: [_joined(ref) for ref in pair.references] for index, pair in enumerate(pairs)}
        if not any(ref for refs in references.values() for ref in refs):
            raise DegenerateIdfError("CIDEr references hold no tokens")
        candidates = {index: [_joined(pair.candidate)] for index, pair in enumerate(pairs)}

        _, scores = self.scorer.compute_score(references, candidates)
        return [float(score) for score in scores]


def cider(pairs):
    """Corpus CIDEr-D: the mean of the per-pair scores."""
    scores = CiderD().score_pairs(pairs)
    return math.fsum(scores) / len(scores)


def evaluate_pairs(pairs):
    """
    Scores a corpus with every NLP metric.

    Returns:
        dict: `bleu_1`..`bleu_4`, `rouge_l`, `cider` and `n_pairs`.
    """
    pairs = _require_pairs(pairs)
    summary = {f"bleu_{n}": bleu_n(pairs, n) for n in range(1, 5)}
    summary["rouge_l"] = rouge_l(pairs)
    summary["cider"] = cider(pairs)
    summary["n_pairs"] = len(pairs)
    logger.info(f"Scored {len(pairs)} pairs: BLEU-4={summary['bleu_4']:.4f} CIDEr={summary['cider']:.4f}")
    return summary


def load_predictions(path):
    """
    Reads JSON-lines prediction records `{id, candidate, references[]}`.

    Raises:
        MissingPathError: If the file does not exist.
        FileFormatError: On a malformed record, naming the line number.
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.read().splitlines()
    except FileNotFoundError:
        raise MissingPathError(str(path), path=str(path))

    pairs = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            pairs.append(EvalPair(
                candidate=record["candidate"],
                references=tuple(record["references"]),
                id=str(record.get("id", "")),
            ))
        except (json.JSONDecodeError, KeyError, TypeError, ConfigError) as e:
            raise FileFormatError(f"line {number}: bad prediction record ({e})", path=str(path), offset=number)
    return pairs
