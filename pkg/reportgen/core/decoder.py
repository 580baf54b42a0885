"""
Greedy auto-regressive report generation with cross-attention traces.
"""
import json
import logging
from concurrent import futures
from dataclasses import dataclass, field

import numpy as np

from errors import FileFormatError, IdRangeError, MissingPathError
from reportgen.core import tensor as T
from reportgen.core.tokenizer import BOS_ID, EOS_ID
from reportgen.core.transformer import decoder_forward, encode_image, unflatten_image_positions

logger = logging.getLogger(__name__)


@dataclass
class AttentionTrace:
    """
    Cross-attention recorded while generating one report.

    Attributes:
        grid (tuple): `(h, w)` extents of the image grid.
        head_rows (list): Per generated token, the raw last-layer rows `[n_head, h*w]`.
        maps (list): Per generated token, the head-averaged last-layer map `[h, w]`.
        layer_maps (dict): Layer index to per-token head-averaged maps; holds only
            the last layer unless every layer was traced.
    """
    grid: tuple
    head_rows: list = field(default_factory=list)
    maps: list = field(default_factory=list)
    layer_maps: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.maps)


@dataclass
class GenerationResult:
    text: str
    token_ids: list
    trace: AttentionTrace


def attention_map_for_token(trace, t):
    """
    Head-averaged last-layer cross-attention map of generated token `t`, shaped `[h, w]`.

    Raises:
        IdRangeError: If `t` is outside the trace.
    """
    if not 0 <= t < len(trace):
        raise IdRangeError(f"token index {t} is outside a trace of length {len(trace)}")
    return trace.maps[t]


def greedy_generate(grid, params, config, tokenizer, trace_layers="last"):
    """
    Generates a report by repeatedly appending the argmax next token.

    Generation starts from BOS and stops after EOS or once `config.max_len`
    tokens have been produced. Ties in the argmax go to the lowest token id.

    Args:
        grid (np.ndarray): Image feature grid matching `config.image_grid`.
        params (ModelParams): Frozen parameters; never modified.
        config (ModelConfig): Model hyper-parameters.
        tokenizer (BpeTokenizer): Used to turn ids into text.
        trace_layers (str): `"last"` or `"all"`.

    Returns:
        GenerationResult: Text without special tokens, generated ids (EOS included
        when produced) and the attention trace, one entry per generated id.
    """
    h, w, _ = config.image_grid
    trace = AttentionTrace(grid=(h, w))
    generated = []

    with T.no_grad():
        image_seq = encode_image(grid, params, config)
        image_seq = T.reshape(image_seq, image_seq.shape[1:])

        for _ in range(config.max_len):
            logits, cross = decoder_forward(image_seq, [BOS_ID] + generated, params, config, trace_layers=trace_layers)
            next_id = int(np.argmax(logits.data[-1]))

            for layer, weights in cross.layers.items():
                rows = weights[:, -1, :]
                trace.layer_maps.setdefault(layer, []).append(unflatten_image_positions(rows.mean(axis=0), h, w))
                if layer == cross.last_layer:
                    trace.head_rows.append(rows)
            trace.maps = trace.layer_maps[cross.last_layer]

            generated.append(next_id)
            if next_id == EOS_ID:
                break

    text = tokenizer.decode(generated)
    logger.debug(f"Generated {len(generated)} tokens: {text!r}")
    return GenerationResult(text=text, token_ids=generated, trace=trace)


def rescore_argmax(grid, token_ids, params, config):
    """Argmax at every position when the whole generated prefix is fed at once."""
    with T.no_grad():
        image_seq = encode_image(grid, params, config)
        image_seq = T.reshape(image_seq, image_seq.shape[1:])
        logits, _ = decoder_forward(image_seq, [BOS_ID] + list(token_ids[:-1]), params, config)
    return [int(i) for i in np.argmax(logits.data, axis=-1)]


def rescore_consistent(grid, token_ids, params, config):
    """True when one full-prefix pass picks the same token the step-by-step loop picked at every position."""
    return not token_ids or rescore_argmax(grid, token_ids, params, config) == list(token_ids)


def generate_many(grids, params, config, tokenizer, workers=1, trace_layers="last"):
    """
    Generates one report per grid over a shared frozen parameter snapshot.

    Results come back in input order whatever the worker count.
    """
    frozen = params.snapshot()
    if workers <= 1:
        return [greedy_generate(grid, frozen, config, tokenizer, trace_layers) for grid in grids]

    with futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda grid: greedy_generate(grid, frozen, config, tokenizer, trace_layers), grids))


def region_attention_mass(attention_map, cells):
    """Total attention on the given `(row, col)` cells."""
    attention_map = np.asarray(attention_map)
    return float(sum(attention_map[r, c] for r, c in cells))


def attention_bounding_box(attention_map, fraction=0.5):
    """
    Smallest box covering every cell whose weight reaches `fraction` of the peak.

    Returns:
        tuple[int, int, int, int]: `(row_min, col_min, row_max, col_max)`, inclusive.
    """
    attention_map = np.asarray(attention_map)
    rows, cols = np.nonzero(attention_map >= fraction * attention_map.max())
    return int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())


def write_attention_dump(path, report, tokens, trace, manifest=None):
    """
    Writes the text attention dump.

    A `#`-prefixed header gives the report, the token list, the grid extents,
    the traced layers and optionally the run manifest; then, for each layer, a
    `# layer: <i>` line and one line per generated token holding `h*w`
    space-separated decimals in row-major cell order. Values are written with
    `repr`, so reading them back is bit-exact.
    """
    h, w = trace.grid
    layers = sorted(trace.layer_maps)
    lines = [
        f"# report: {json.dumps(report)}",
        f"# tokens: {json.dumps(list(tokens))}",
        f"# grid: {h} {w}",
        f"# layers: {' '.join(str(layer) for layer in layers)}",
    ]
    if manifest is not None:
        lines.append(f"# manifest: {json.dumps(manifest, sort_keys=True)}")
    for layer in layers:
        lines.append(f"# layer: {layer}")
        for attention_map in trace.layer_maps[layer]:
            lines.append(" ".join(repr(float(v)) for v in np.asarray(attention_map).reshape(-1)))

    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")


@dataclass
class AttentionDump:
    report: str
    tokens: list
    grid: tuple
    layer_maps: dict
    manifest: dict = None

    @property
    def maps(self):
        return self.layer_maps[max(self.layer_maps)]


def read_attention_dump(path):
    """
    Parses a file written by `write_attention_dump`.

    Raises:
        MissingPathError: If the file does not exist.
        FileFormatError: On malformed content, naming the line number.
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.read().splitlines()
    except FileNotFoundError:
        raise MissingPathError(str(path), path=str(path))

    header = {}
    layer_maps = {}
    current = None
    grid = None
    for number, line in enumerate(lines, start=1):
        try:
            if line.startswith("# layer: "):
                current = int(line[len("# layer: "):])
                layer_maps[current] = []
            elif line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                header[key] = value
                if key == "grid":
                    grid = tuple(int(v) for v in value.split())
            else:
                values = np.array([float(v) for v in line.split()])
                layer_maps[current].append(unflatten_image_positions(values, *grid))
        except (ValueError, KeyError, TypeError) as e:
            raise FileFormatError(f"line {number}: {e}", path=str(path), offset=number)

    for key in ("report", "tokens", "grid"):
        if key not in header:
            raise FileFormatError(f"missing '# {key}:' header", path=str(path), offset=1)

    return AttentionDump(
        report=json.loads(header["report"]),
        tokens=json.loads(header["tokens"]),
        grid=grid,
        layer_maps=layer_maps,
        manifest=json.loads(header["manifest"]) if "manifest" in header else None,
    )
