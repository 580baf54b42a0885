"""
Trainable byte-pair-encoding sub-word tokenizer.

Text is lowercased and split on whitespace into words. Each word becomes a
sequence of single-character symbols whose last symbol carries the
end-of-word marker `</w>`. Punctuation, symbol characters and digits stay
standalone symbols: no merge is ever learned across them, so no learned symbol
can spell a reserved token such as `<pad>`.
"""
import collections
import logging
import unicodedata
from dataclasses import dataclass, field

from errors import ConfigError, EmptyCorpusError, IdRangeError, MissingPathError, VocabFormatError

logger = logging.getLogger(__name__)

END_OF_WORD = "</w>"
PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)
REPLACEMENT_GLYPH = "�"

HEADER_PREFIX = "BPE-V1"
VOCAB_SENTINEL = "#VOCAB"


def _is_isolated(char):
    return char.isdigit() or unicodedata.category(char)[0] in "PS"


def normalize(text):
    """Lowercases and collapses whitespace; `decode(encode(t)) == normalize(t)` on the training alphabet."""
    return " ".join(text.lower().split())


def pre_split(text):
    """
    Breaks text into words of initial symbols.

    Args:
        text (str): Raw text.

    Returns:
        list[tuple[str, ...]]: One symbol tuple per whitespace-separated word.
    """
    words = []
    for word in normalize(text).split(" "):
        if not word:
            continue
        symbols = list(word)
        symbols[-1] += END_OF_WORD
        words.append(tuple(symbols))
    return words


def _bare(symbol):
    return symbol[:-len(END_OF_WORD)] if symbol.endswith(END_OF_WORD) else symbol


def _mergeable(left, right):
    # isolated symbols never grow, so a bare length of 1 is enough to spot them
    return not any(len(_bare(s)) == 1 and _is_isolated(_bare(s)) for s in (left, right))


def _merge_word(symbols, pair, merged):
    out = []
    index = 0
    while index < len(symbols):
        if index + 1 < len(symbols) and symbols[index] == pair[0] and symbols[index + 1] == pair[1]:
            out.append(merged)
            index += 2
        else:
            out.append(symbols[index])
            index += 1
    return tuple(out)


@dataclass(frozen=True)
class MergeTable:
    """
    Learned merges in rank order; a merged symbol is the concatenation of its pair.

    Attributes:
        pairs (tuple): `(left, right)` pairs, rank = position.
    """
    pairs: tuple = ()
    ranks: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pairs = tuple(tuple(pair) for pair in self.pairs)
        ranks = {}
        for rank, pair in enumerate(pairs):
            if pair in ranks:
                raise VocabFormatError(f"duplicate merge pair {pair}")
            ranks[pair] = rank
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "ranks", ranks)

    def __len__(self):
        return len(self.pairs)


class Vocab:
    """
    Token to id bijection; ids 0..3 are the reserved PAD, BOS, EOS and UNK tokens.
    """

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise VocabFormatError("ids 0..3 must be the reserved special tokens")
        self.id_to_token = tokens
        self.token_to_id = {}
        for index, token in enumerate(tokens):
            if token in self.token_to_id:
                raise VocabFormatError(f"token {token!r} appears twice")
            self.token_to_id[token] = index

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.id_to_token == other.id_to_token

    def id_of(self, token):
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, token_id):
        if not 0 <= token_id < len(self.id_to_token):
            raise IdRangeError(f"token id {token_id} is outside [0, {len(self.id_to_token)})")
        return self.id_to_token[token_id]


def train_bpe(corpus, target_vocab_size):
    """
    Learns merges by greedily joining the most frequent adjacent symbol pair.

    Ties between equally frequent pairs go to the lexicographically smallest
    `(left, right)`. Training stops once the vocabulary reaches
    `target_vocab_size` or no pair occurs at least twice.

    Every alphabet character enters the vocabulary in both its bare and its
    end-of-word form. When those forms alone reach the target, the vocabulary
    grows past it to hold them and no merge is learned.

    Args:
        corpus (Sequence[str]): Training texts.
        target_vocab_size (int): Desired vocabulary size, reserved tokens included.

    Returns:
        tuple[MergeTable, Vocab]: The learned merges and vocabulary.

    Raises:
        EmptyCorpusError: If the corpus holds no words.
        ConfigError: If the target does not exceed the base alphabet plus the reserved tokens.
    """
    word_counts = collections.Counter()
    for text in corpus:
        word_counts.update(pre_split(text))
    if not word_counts:
        raise EmptyCorpusError("the tokenizer corpus contains no words")

    alphabet = sorted({_bare(symbol) for word in word_counts for symbol in word})
    if target_vocab_size <= len(alphabet) + len(SPECIAL_TOKENS):
        raise ConfigError(
            f"target vocab size {target_vocab_size} must exceed {len(alphabet)} base characters "
            f"plus {len(SPECIAL_TOKENS)} reserved tokens"
        )
    base_symbols = []
    for char in alphabet:
        base_symbols.extend((char, char + END_OF_WORD))
    if len(base_symbols) + len(SPECIAL_TOKENS) >= target_vocab_size:
        logger.warning(
            f"Target vocab size {target_vocab_size} leaves no room for merges "
            f"beyond {len(base_symbols)} base symbols"
        )

    tokens = list(SPECIAL_TOKENS) + base_symbols
    known = set(tokens)
    words = dict(word_counts)
    merges = []

    while len(tokens) < target_vocab_size:
        pair_counts = collections.Counter()
        for word, count in words.items():
            for left, right in zip(word, word[1:]):
                if _mergeable(left, right):
                    pair_counts[(left, right)] += count
        if not pair_counts:
            break

        best_count = max(pair_counts.values())
        if best_count < 2:
            break
        best = min(pair for pair, count in pair_counts.items() if count == best_count)

        merged = best[0] + best[1]
        merges.append(best)
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
        words = {_merge_word(word, best, merged): count for word, count in words.items()}

    logger.info(f"Learned {len(merges)} merges, vocab size {len(tokens)}")
    return MergeTable(tuple(merges)), Vocab(tokens)


def _apply_merges(symbols, merges):
    symbols = tuple(symbols)
    while len(symbols) > 1:
        candidates = [
            (merges.ranks[pair], pair)
            for pair in zip(symbols, symbols[1:])
            if pair in merges.ranks
        ]
        if not candidates:
            break
        _, pair = min(candidates)
        symbols = _merge_word(symbols, pair, pair[0] + pair[1])
    return symbols


def encode(text, merges, vocab, add_specials=True):
    """
    Encodes text into token ids, applying the lowest-rank merge first.

    Args:
        text (str): Text to encode.
        merges (MergeTable): Learned merges.
        vocab (Vocab): Token to id map.
        add_specials (bool): Wrap the ids in BOS ... EOS.

    Returns:
        list[int]: Token ids; symbols outside the vocabulary map to UNK.
    """
    ids = [BOS_ID] if add_specials else []
    for word in pre_split(text):
        ids.extend(vocab.id_of(symbol) for symbol in _apply_merges(word, merges))
    if add_specials:
        ids.append(EOS_ID)
    return ids


def decode(ids, vocab):
    """
    Turns token ids back into text, dropping the reserved tokens.

    Raises:
        IdRangeError: If an id is not in the vocabulary.
    """
    pieces = []
    for token_id in ids:
        token = vocab.token_of(int(token_id))
        if token == UNK:
            pieces.append(REPLACEMENT_GLYPH)
        elif token not in SPECIAL_TOKENS:
            pieces.append(token)
    return "".join(pieces).replace(END_OF_WORD, " ").strip()


class BpeTokenizer:
    """
    Immutable pairing of a merge table and a vocabulary with a per-word cache.

    Safe for concurrent encode/decode: the cache only ever gains identical entries.
    """

    def __init__(self, merges, vocab):
        self.merges = merges
        self.vocab = vocab
        self._cache = {}

    @classmethod
    def train(cls, corpus, target_vocab_size):
        return cls(*train_bpe(corpus, target_vocab_size))

    @classmethod
    def load(cls, path):
        return cls(*load_vocab(path))

    def __len__(self):
        return len(self.vocab)

    def encode(self, text, add_specials=True):
        ids = [BOS_ID] if add_specials else []
        for word in pre_split(text):
            if word not in self._cache:
                self._cache[word] = [self.vocab.id_of(s) for s in _apply_merges(word, self.merges)]
            ids.extend(self._cache[word])
        if add_specials:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids):
        return decode(ids, self.vocab)

    def tokens(self, ids):
        return [self.vocab.token_of(int(token_id)) for token_id in ids]

    def save(self, path):
        save_vocab(path, self.merges, self.vocab)


def save_vocab(path, merges, vocab):
    """
    Writes the `BPE-V1` text format: header, merge lines, `#VOCAB`, `token<TAB>id` lines.
    """
    lines = [f"{HEADER_PREFIX} {len(vocab)}"]
    lines.extend(f"{left} {right}" for left, right in merges.pairs)
    lines.append(VOCAB_SENTINEL)
    lines.extend(f"{token}\t{index}" for index, token in enumerate(vocab.id_to_token))
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")


def load_vocab(path):
    """
    Reads a vocab file written by `save_vocab`.

    Returns:
        tuple[MergeTable, Vocab]: The merges, in their saved rank order, and the vocabulary.

    Raises:
        MissingPathError: If the file does not exist.
        VocabFormatError: On any malformed or truncated content, naming the line number.
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.read().split("\n")
    except FileNotFoundError:
        raise MissingPathError(str(path), path=str(path))

    if lines and lines[-1] == "":
        lines.pop()

    def fail(line_number, reason):
        raise VocabFormatError(f"line {line_number}: {reason}", path=str(path), offset=line_number)

    if not lines:
        fail(1, "missing header")
    header = lines[0].split(" ")
    if len(header) != 2 or header[0] != HEADER_PREFIX or not header[1].isdigit():
        fail(1, f"expected '{HEADER_PREFIX} <vocab_size>'")
    expected_size = int(header[1])

    pairs = []
    line_number = 2
    while True:
        if line_number > len(lines):
            fail(line_number, f"missing {VOCAB_SENTINEL} sentinel")
        line = lines[line_number - 1]
        if line == VOCAB_SENTINEL:
            break
        parts = line.split(" ")
        if len(parts) != 2 or not all(parts):
            fail(line_number, "expected a merge pair 'left right'")
        pairs.append(tuple(parts))
        line_number += 1

    tokens = []
    for line_number in range(line_number + 1, len(lines) + 1):
        parts = lines[line_number - 1].split("\t")
        if len(parts) != 2 or not parts[1].isdigit():
            fail(line_number, "expected 'token<TAB>id'")
        if int(parts[1]) != len(tokens):
            fail(line_number, f"expected id {len(tokens)}, got {parts[1]}")
        tokens.append(parts[0])

    if len(tokens) != expected_size:
        fail(len(lines) + 1, f"header announces {expected_size} tokens, found {len(tokens)}")

    try:
        return MergeTable(tuple(pairs)), Vocab(tokens)
    except VocabFormatError as e:
        raise VocabFormatError(e.detail, path=str(path))
