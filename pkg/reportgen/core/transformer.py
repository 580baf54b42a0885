"""
Image-conditioned transformer decoder.

The image feature grid `[h, w, c]` is flattened row-major into a sequence of
`h*w` cells, projected to `d_model` by a learned patch embedding and treated
like a sequence of text. Each decoder block runs causal self-attention over
the text stream, cross-attention with text queries against image keys and
values, and a position-wise feed-forward network, each wrapped in a residual
connection followed by layer normalization.
"""
import logging
import math
from collections import OrderedDict, namedtuple
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, DimensionError, SequenceLengthError
from reportgen.core import tensor as T
from reportgen.core.tensor import Tensor

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9
LAYER_NORM_EPS = 1e-5

AttentionWeights = namedtuple("AttentionWeights", ["w_q", "w_k", "w_v", "w_o"])


@dataclass(frozen=True)
class AttentionMask:
    """
    Additive attention mask; entries are 0 (permitted) or `MASK_VALUE` (blocked).

    Attributes:
        grid (np.ndarray): Mask of shape `[Lq, Lk]`, broadcast over batch and heads.
    """
    grid: np.ndarray

    @classmethod
    def causal(cls, length):
        """Position `i` may attend to positions `j <= i`."""
        blocked = np.triu(np.ones((length, length), dtype=bool), k=1)
        return cls(np.where(blocked, MASK_VALUE, 0.0))

    @classmethod
    def permit_all(cls, query_length, key_length):
        return cls(np.zeros((query_length, key_length)))

    def as_tensor(self):
        return Tensor(self.grid)


def scaled_dot_product_attention(q, k, v, mask=None):
    """
    Computes `softmax(Q Kᵀ / sqrt(d) + mask) V`.

    Args:
        q (Tensor): Queries `[.., Lq, d]`.
        k (Tensor): Keys `[.., Lk, d]`.
        v (Tensor): Values `[.., Lk, dv]`.
        mask (AttentionMask, optional): Additive mask broadcastable to `[Lq, Lk]`.

    Returns:
        tuple[Tensor, Tensor]: The attended values `[.., Lq, dv]` and the weights `[.., Lq, Lk]`.

    Raises:
        DimensionError: If query and key depths differ.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query depth {q.shape} does not match key depth {k.shape}")

    scores = T.scale(T.matmul(q, T.transpose_last_two(k)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = T.add(scores, mask.as_tensor())
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v), weights


def multi_head_attention(q_in, k_in, v_in, weights, n_head, mask=None):
    """
    Runs `n_head` scaled dot-product attentions in parallel and projects their concatenation.

    `h_i = Attention(q_in W_i^Q, k_in W_i^K, v_in W_i^V)`, `H = Concat(h_1..h_n)`,
    `O = H W_h`. The per-head projections are the column blocks of `weights.w_q`,
    `weights.w_k` and `weights.w_v`.

    Args:
        q_in (Tensor): Query stream `[.., Lq, d_model]`.
        k_in (Tensor): Key stream `[.., Lk, d_model]`.
        v_in (Tensor): Value stream `[.., Lk, d_model]`.
        weights (AttentionWeights): Projection matrices.
        n_head (int): Number of heads.
        mask (AttentionMask, optional): Additive mask.

    Returns:
        tuple[Tensor, np.ndarray]: Output `[.., Lq, d_model]` and per-head weights `[.., n_head, Lq, Lk]`.
    """
    queries = T.split_last(T.matmul(q_in, weights.w_q), n_head)
    keys = T.split_last(T.matmul(k_in, weights.w_k), n_head)
    values = T.split_last(T.matmul(v_in, weights.w_v), n_head)

    heads = []
    head_weights = []
    for q, k, v in zip(queries, keys, values):
        head, attention = scaled_dot_product_attention(q, k, v, mask)
        heads.append(head)
        head_weights.append(attention.data)

    output = T.matmul(T.concat_last(heads), weights.w_o)
    return output, np.stack(head_weights, axis=-3)


def flatten_image_features(grid):
    """
    Flattens `[.., h, w, c]` into `[.., h*w, c]`; cell `(r, col)` lands at index `r*w + col`.
    """
    grid = T.as_tensor(grid)
    if grid.ndim < 3:
        raise DimensionError(f"image grid needs rank >= 3, got shape {grid.shape}")
    h, w, c = grid.shape[-3:]
    return T.reshape(grid, grid.shape[:-3] + (h * w, c))


def unflatten_image_positions(values, h, w):
    """Inverse of the row-major flattening for any array whose last axis has `h*w` entries."""
    values = np.asarray(values)
    if values.shape[-1] != h * w:
        raise DimensionError(f"cannot unflatten last extent of {values.shape} into {h}x{w}")
    return values.reshape(values.shape[:-1] + (h, w))


def positional_encoding(length, d_model):
    """Fixed sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(..)`."""
    positions = np.arange(length, dtype=np.float64)[:, None]
    even = np.arange(0, d_model, 2, dtype=np.float64)
    angles = positions / np.power(10000.0, even / d_model)

    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table


def parameter_shapes(config):
    """Names and shapes of every learnable tensor, in checkpoint order."""
    d, dff = config.d_model, config.dff
    shapes = OrderedDict()
    shapes["token_embedding"] = (config.vocab_size, d)
    shapes["image_embedding"] = (config.image_grid[2], d)
    for layer in range(config.num_layers):
        prefix = f"layers.{layer}"
        for block in ("self_attn", "cross_attn"):
            for name in AttentionWeights._fields:
                shapes[f"{prefix}.{block}.{name}"] = (d, d)
        shapes[f"{prefix}.ffn.w1"] = (d, dff)
        shapes[f"{prefix}.ffn.b1"] = (dff,)
        shapes[f"{prefix}.ffn.w2"] = (dff, d)
        shapes[f"{prefix}.ffn.b2"] = (d,)
        for norm in ("norm1", "norm2", "norm3"):
            shapes[f"{prefix}.{norm}.gain"] = (d,)
            shapes[f"{prefix}.{norm}.bias"] = (d,)
    shapes["output.weight"] = (d, config.vocab_size)
    shapes["output.bias"] = (config.vocab_size,)
    return shapes


class ModelParams:
    """
    The full set of learnable tensors, keyed by name.

    Owned exclusively by the training loop while training; `snapshot()` gives a
    frozen copy that concurrent decoding sessions may share read-only.
    """

    def __init__(self, tensors):
        self.tensors = OrderedDict(tensors)

    @classmethod
    def initialize(cls, config, seed=0):
        """
        Draws fresh parameters.

        Matrices are uniform in `±sqrt(6 / (fan_in + fan_out))`; layer-norm gains
        start at one; biases start at zero.
        """
        rng = np.random.default_rng(seed)
        tensors = OrderedDict()
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".gain"):
                values = np.ones(shape)
            elif len(shape) == 1:
                values = np.zeros(shape)
            else:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                values = rng.uniform(-limit, limit, size=shape)
            tensors[name] = Tensor(values, requires_grad=True)
        return cls(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def attention(self, prefix):
        return AttentionWeights(*(self.tensors[f"{prefix}.{name}"] for name in AttentionWeights._fields))

    def count(self):
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def grads(self):
        """Current gradients, zeros for tensors that received none."""
        return OrderedDict(
            (name, t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in self.tensors.items()
        )

    def all_finite(self):
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())

    def snapshot(self):
        return ModelParams((name, Tensor(t.data)) for name, t in self.tensors.items())

    def validate(self, config):
        """
        Raises:
            ConfigError: If names or shapes disagree with `config`.
        """
        expected = parameter_shapes(config)
        if list(expected) != list(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ConfigError(f"parameter names differ from config (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ConfigError(f"{name} has shape {self.tensors[name].shape}, config expects {shape}")


@dataclass
class CrossAttention:
    """
    Cross-attention weights recorded during one forward pass.

    Attributes:
        layers (dict): Decoder layer index to weights `[.., n_head, Lt, Li]`.
        last_layer (int): Index of the last decoder layer.
    """
    layers: dict
    last_layer: int

    @property
    def last(self):
        return self.layers[self.last_layer]


def encode_image(grids, params, config):
    """
    Flattens image grids, applies the patch embedding and, when enabled, positional encodings.

    Args:
        grids (array-like): `[h, w, c]` or `[B, h, w, c]` feature grids.

    Returns:
        Tensor: Image sequence `[B, h*w, d_model]` (batch axis always present).

    Raises:
        DimensionError: If grid extents differ from `config.image_grid`.
    """
    grids = np.asarray(grids, dtype=np.float64)
    if grids.ndim == 3:
        grids = grids[None]
    if grids.ndim != 4 or tuple(grids.shape[1:]) != config.image_grid:
        raise DimensionError(f"image grids {grids.shape} do not match configured grid {config.image_grid}")

    sequence = T.matmul(flatten_image_features(Tensor(grids)), params["image_embedding"])
    if config.image_positional_encoding:
        sequence = T.add(sequence, Tensor(positional_encoding(config.image_length, config.d_model)))
    return sequence


def _sublayer(x, delta, gain, bias, config, train_mode, rng):
    return T.layer_norm(T.add(x, T.dropout(delta, config.dropout, rng, train_mode)), gain, bias, LAYER_NORM_EPS)


def decoder_forward(image_seq, token_ids, params, config, train_mode=False, rng=None, trace_layers="last"):
    """
    Runs the decoder stack over a token prefix conditioned on an image sequence.

    Args:
        image_seq (Tensor): Embedded image sequence `[Li, d_model]` or `[B, Li, d_model]`.
        token_ids (array-like): Decoder input ids `[Lt]` or `[B, Lt]`.
        params (ModelParams): Learnable tensors.
        config (ModelConfig): Hyper-parameters.
        train_mode (bool): Enables dropout.
        rng (np.random.Generator, optional): Dropout generator, required in train mode with dropout > 0.
        trace_layers (str): `"last"` records the last layer's cross-attention, `"all"` records every layer.

    Returns:
        tuple[Tensor, CrossAttention]: Logits `[(B,) Lt, vocab_size]` and cross-attention weights.

    Raises:
        SequenceLengthError: If `Lt > config.max_len`.
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    unbatched = token_ids.ndim == 1
    if unbatched:
        token_ids = token_ids[None]
    if image_seq.ndim == 2:
        image_seq = T.reshape(image_seq, (1,) + image_seq.shape)

    length = token_ids.shape[1]
    if length > config.max_len:
        raise SequenceLengthError(f"{length} tokens exceed max_len={config.max_len}")
    if image_seq.shape[0] != token_ids.shape[0]:
        raise DimensionError(f"image batch {image_seq.shape} does not match token batch {token_ids.shape}")

    x = T.add(T.embedding(params["token_embedding"], token_ids), Tensor(positional_encoding(length, config.d_model)))
    x = T.dropout(x, config.dropout, rng, train_mode)
    causal = AttentionMask.causal(length)

    recorded = {}
    last_layer = config.num_layers - 1
    for layer in range(config.num_layers):
        prefix = f"layers.{layer}"

        attended, _ = multi_head_attention(x, x, x, params.attention(f"{prefix}.self_attn"), config.n_head, causal)
        x = _sublayer(x, attended, params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"], config, train_mode, rng)

        attended, cross = multi_head_attention(
            x, image_seq, image_seq, params.attention(f"{prefix}.cross_attn"), config.n_head
        )
        x = _sublayer(x, attended, params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"], config, train_mode, rng)
        if trace_layers == "all" or layer == last_layer:
            recorded[layer] = cross[0] if unbatched else cross

        hidden = T.relu(T.add(T.matmul(x, params[f"{prefix}.ffn.w1"]), params[f"{prefix}.ffn.b1"]))
        fed = T.add(T.matmul(hidden, params[f"{prefix}.ffn.w2"]), params[f"{prefix}.ffn.b2"])
        x = _sublayer(x, fed, params[f"{prefix}.norm3.gain"], params[f"{prefix}.norm3.bias"], config, train_mode, rng)

    logits = T.add(T.matmul(x, params["output.weight"]), params["output.bias"])
    if unbatched:
        logits = T.reshape(logits, logits.shape[1:])
    return logits, CrossAttention(recorded, last_layer)


def model_forward(grids, token_ids, params, config, train_mode=False, rng=None, trace_layers="last"):
    """Convenience wrapper: `encode_image` followed by `decoder_forward`."""
    image_seq = encode_image(grids, params, config)
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.ndim == 1:
        image_seq = T.reshape(image_seq, image_seq.shape[1:])
    return decoder_forward(image_seq, token_ids, params, config, train_mode, rng, trace_layers)
