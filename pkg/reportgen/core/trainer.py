import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from errors import ContractError, DegenerateSampleError, DivergenceError, EmptyCorpusError, SequenceLengthError
from reportgen.core import tensor as T
from reportgen.core.checkpoint import save_checkpoint
from reportgen.core.tokenizer import PAD_ID
from reportgen.core.transformer import ModelParams, model_forward

logger = logging.getLogger(__name__)

LOG_FILE_NAME = "train_log.tsv"
FINAL_CHECKPOINT_NAME = "model.rckt"


def make_teacher_forcing_pair(token_ids):
    """
    Shifts a sequence by one: `input = ids[:-1]`, `target = ids[1:]`.

    Raises:
        DegenerateSampleError: If fewer than two ids are given.
    """
    token_ids = list(token_ids)
    if len(token_ids) < 2:
        raise DegenerateSampleError(f"teacher forcing needs at least 2 ids, got {len(token_ids)}")
    return token_ids[:-1], token_ids[1:]


def pad_batch(sequences, pad_id=PAD_ID):
    """Right-pads id sequences to the longest one, returning an int64 grid `[B, L]`."""
    width = max(len(seq) for seq in sequences)
    grid = np.full((len(sequences), width), pad_id, dtype=np.int64)
    for row, seq in enumerate(sequences):
        grid[row, :len(seq)] = seq
    return grid


def attach_token_ids(samples, tokenizer, max_len):
    """
    Encodes every sample's report with BOS/EOS into `sample.token_ids`.

    Raises:
        SequenceLengthError: If an encoded report, BOS and EOS included, holds more than `max_len` ids.
    """
    for sample in samples:
        ids = tokenizer.encode(sample.report)
        if len(ids) > max_len:
            raise SequenceLengthError(f"sample {sample.id} encodes to {len(ids)} ids, max_len is {max_len}")
        sample.token_ids = tuple(ids)
    return samples


@dataclass
class Batch:
    grids: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray

    @classmethod
    def assemble(cls, samples):
        pairs = []
        for sample in samples:
            if sample.token_ids is None:
                raise ContractError(f"sample {sample.id} has no token ids, run attach_token_ids first")
            pairs.append(make_teacher_forcing_pair(sample.token_ids))
        return cls(
            grids=np.stack([np.asarray(sample.image, dtype=np.float64) for sample in samples]),
            inputs=pad_batch([inp for inp, _ in pairs]),
            targets=pad_batch([tgt for _, tgt in pairs]),
        )


def batch_loss(batch, params, model_config, train_mode=False, rng=None):
    """
    Teacher-forced loss of one batch.

    Returns:
        tuple[Tensor, int, int]: Mean cross-entropy over non-pad targets, the
        number of correctly predicted targets, and the number of non-pad targets.
    """
    logits, _ = model_forward(batch.grids, batch.inputs, params, model_config, train_mode, rng)
    loss = T.cross_entropy_from_logits(logits, batch.targets, PAD_ID)

    keep = batch.targets != PAD_ID
    correct = int(((np.argmax(logits.data, axis=-1) == batch.targets) & keep).sum())
    return loss, correct, int(keep.sum())


@dataclass
class AdamState:
    """First and second moment estimates per parameter name, plus the step counter."""
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
        )


def adam_step(params, grads, state, train_config, step):
    """
    Applies one bias-corrected Adam update in place.

    Args:
        params (ModelParams): Parameters to update.
        grads (dict): Parameter name to gradient array.
        state (AdamState): Moment estimates, updated in place.
        train_config (TrainConfig): Learning rate, betas and eps.
        step (int): 1-based step number used for bias correction.
    """
    beta1, beta2 = train_config.beta1, train_config.beta2
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step

    for name, tensor in params.items():
        grad = grads[name]
        if grad.shape != tensor.shape:
            raise ContractError(f"gradient of {name} has shape {grad.shape}, expected {tensor.shape}")
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * grad
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * grad * grad
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        tensor.data = tensor.data - train_config.learning_rate * m_hat / (np.sqrt(v_hat) + train_config.eps)
    state.step = step


def clip_gradients(grads, max_norm):
    """
    Rescales gradients so their global L2 norm does not exceed `max_norm`.

    Returns:
        tuple[dict, float]: The (possibly rescaled) gradients and the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


@dataclass
class EpochStats:
    mean_loss: float
    token_accuracy: float
    n_tokens: int
    wallclock_s: float = 0.0


def _batches(samples, batch_size, order):
    for start in range(0, len(order), batch_size):
        yield Batch.assemble([samples[i] for i in order[start:start + batch_size]])


def train_epoch(samples, params, model_config, train_config, state=None, rng=None):
    """
    Runs one teacher-forcing pass over `samples`, updating `params` batch by batch.

    Batches are drawn from a seeded shuffle, padded to their longest sequence and
    loss-masked on PAD. One generator drives both shuffling and dropout.

    Args:
        samples (Sequence[Sample]): Training samples with token ids attached.
        params (ModelParams): Parameters, updated in place.
        model_config (ModelConfig): Model hyper-parameters.
        train_config (TrainConfig): Optimisation settings.
        state (AdamState, optional): Optimizer state carried across epochs.
        rng (np.random.Generator, optional): Generator carried across epochs.

    Returns:
        EpochStats: Token-weighted mean loss and token accuracy over non-pad targets.

    Raises:
        EmptyCorpusError: If `samples` is empty.
        DivergenceError: If a batch produces a non-finite loss.
    """
    if not samples:
        raise EmptyCorpusError("no training samples")
    state = state if state is not None else AdamState.zeros(params)
    rng = rng if rng is not None else np.random.default_rng(train_config.seed)

    started = time.perf_counter()
    total_loss = 0.0
    total_correct = 0
    total_tokens = 0

    order = rng.permutation(len(samples))
    for batch_index, batch in enumerate(_batches(samples, train_config.batch_size, order)):
        params.zero_grad()
        loss, correct, count = batch_loss(batch, params, model_config, train_mode=True, rng=rng)
        if not np.isfinite(loss.item()):
            raise DivergenceError(batch_index, f"loss is {loss.item()}")

        T.backward(loss)
        grads, norm = clip_gradients(params.grads(), train_config.clip_norm)
        adam_step(params, grads, state, train_config, state.step + 1)
        logger.debug(f"batch {batch_index}: loss={loss.item():.6f} grad_norm={norm:.4f}")

        total_loss += loss.item() * count
        total_correct += correct
        total_tokens += count

    return EpochStats(
        mean_loss=total_loss / total_tokens,
        token_accuracy=total_correct / total_tokens,
        n_tokens=total_tokens,
        wallclock_s=time.perf_counter() - started,
    )


def evaluate_loss(samples, params, model_config, batch_size=16):
    """Eval-mode loss and token accuracy over `samples` in their given order; records no tape."""
    if not samples:
        raise EmptyCorpusError("no evaluation samples")

    total_loss = 0.0
    total_correct = 0
    total_tokens = 0
    with T.no_grad():
        for batch in _batches(samples, batch_size, np.arange(len(samples))):
            loss, correct, count = batch_loss(batch, params, model_config)
            total_loss += loss.item() * count
            total_correct += correct
            total_tokens += count
    return EpochStats(total_loss / total_tokens, total_correct / total_tokens, total_tokens)


@dataclass
class FitResult:
    history: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    best_epoch: int = 0
    artifacts: list = field(default_factory=list)


class Trainer:
    """
    Runs full training and writes its artifacts.

    The trainer owns the parameters, the Adam state and the single seeded
    generator for the whole run, so one seed fixes every shuffle and dropout
    mask and therefore every checkpoint byte.

    Methods:
        fit(train_samples, validation_samples):
            Trains for `train_config.epochs` epochs, writing `epoch_NNN.rckt`
            after every epoch (`epoch_000.rckt` holds the initial weights), one
            tab-separated log line per epoch and the selected `model.rckt`.

    Args:
        model_config (ModelConfig): Model hyper-parameters.
        train_config (TrainConfig): Optimisation settings.
        out_dir (str, optional): Directory for checkpoints and the log; nothing is written when absent.
        params (ModelParams, optional): Starting parameters; freshly initialized from the seed otherwise.
    """

    def __init__(self, model_config, train_config, out_dir=None, params=None):
        self.model_config = model_config
        self.train_config = train_config
        self.out_dir = out_dir
        self.params = params if params is not None else ModelParams.initialize(model_config, train_config.seed)
        self.state = AdamState.zeros(self.params)
        self.rng = np.random.default_rng(train_config.seed)

    def _path(self, name):
        return os.path.join(self.out_dir, name)

    def _checkpoint(self, name, result):
        if self.out_dir is not None:
            save_checkpoint(self._path(name), self.params, self.model_config)
            result.artifacts.append(self._path(name))

    def fit(self, train_samples, validation_samples=None):
        result = FitResult()
        if self.out_dir is not None:
            os.makedirs(self.out_dir, exist_ok=True)
            open(self._path(LOG_FILE_NAME), "w").close()
            result.artifacts.append(self._path(LOG_FILE_NAME))

        logger.info(
            f"Training {self.params.count()} parameters on {len(train_samples)} samples "
            f"for {self.train_config.epochs} epochs"
        )
        self._checkpoint("epoch_000.rckt", result)

        best_loss = math.inf
        best_params = self.params.snapshot()

        for epoch in range(1, self.train_config.epochs + 1):
            stats = train_epoch(
                train_samples, self.params, self.model_config, self.train_config, self.state, self.rng
            )
            result.history.append(stats)
            self._checkpoint(f"epoch_{epoch:03d}.rckt", result)

            if self.out_dir is not None:
                with open(self._path(LOG_FILE_NAME), "a", encoding="utf-8") as log:
                    log.write(f"{epoch}\t{stats.mean_loss:.6f}\t{stats.token_accuracy:.6f}\t{stats.wallclock_s:.3f}\n")

            message = f"epoch {epoch}: loss={stats.mean_loss:.4f} token_acc={stats.token_accuracy:.4f}"
            if validation_samples:
                held_out = evaluate_loss(validation_samples, self.params, self.model_config, self.train_config.batch_size)
                result.validation.append(held_out)
                message += f" val_loss={held_out.mean_loss:.4f}"
                if held_out.mean_loss < best_loss:
                    best_loss = held_out.mean_loss
                    best_params = self.params.snapshot()
                    result.best_epoch = epoch
            logger.info(message)

        if self.train_config.select_best and self.train_config.epochs > 0:
            if validation_samples:
                logger.info(f"Selected epoch {result.best_epoch} by validation loss {best_loss:.4f}")
                self.params = ModelParams(
                    (name, T.Tensor(t.data, requires_grad=True)) for name, t in best_params.items()
                )
            else:
                logger.warning("select_best requested without validation samples, keeping the last epoch")
                result.best_epoch = self.train_config.epochs
        else:
            result.best_epoch = self.train_config.epochs

        self._checkpoint(FINAL_CHECKPOINT_NAME, result)
        return result
