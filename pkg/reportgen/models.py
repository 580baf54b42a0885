import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from errors import ConfigError, FileFormatError, MissingPathError


def _load_json_object(path):
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except FileNotFoundError:
        raise MissingPathError(str(path), path=str(path))
    except json.JSONDecodeError as e:
        raise FileFormatError(f"invalid JSON ({e.msg})", path=str(path), offset=e.pos)

    if not isinstance(payload, dict):
        raise FileFormatError("expected a JSON object", path=str(path), offset=0)
    return payload


def _extents(value):
    return tuple(int(v) for v in value)


def _flag(value):
    if not isinstance(value, (bool, np.bool_)):
        raise TypeError(f"expected true or false, got {value!r}")
    return bool(value)


def _optional(convert):
    return lambda value: None if value is None else convert(value)


class _ConfigRecord:
    """Shared construction helpers for the frozen configuration records."""

    _PRESET_FIELDS = {}

    def _coerce(self, **converters):
        for name, convert in converters.items():
            value = getattr(self, name)
            try:
                object.__setattr__(self, name, convert(value))
            except (TypeError, ValueError):
                raise ConfigError(f"{type(self).__name__}.{name} has an invalid value {value!r}")

    @classmethod
    def from_object(cls, preset, **overrides):
        """
        Builds the record from a preset class of `config.py`.

        Args:
            preset (type): A `config.Config` subclass.
            **overrides: Field values that take precedence over the preset.

        Returns:
            The validated record.
        """
        values = {name: getattr(preset, attr) for name, attr in cls._PRESET_FIELDS.items() if hasattr(preset, attr)}
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_dict(cls, payload, base=None):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")

        values = dataclasses.asdict(base) if base is not None else {}
        values.update(payload)
        return cls(**values)

    @classmethod
    def from_json(cls, path, base=None):
        """Loads the record from a small JSON file, layered over `base` when given."""
        return cls.from_dict(_load_json_object(path), base=base)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ModelConfig(_ConfigRecord):
    """
    Hyper-parameters of the captioning decoder.

    Attributes:
        num_layers (int): Number of stacked decoder blocks.
        n_head (int): Attention heads per multi-head attention sub-layer.
        d_model (int): Width of the residual stream.
        dff (int): Hidden width of the position-wise feed-forward network.
        dropout (float): Drop probability used in train mode.
        vocab_size (int): Number of token ids, reserved ids included.
        max_len (int): Longest token sequence the decoder accepts.
        image_grid (tuple): `(h, w, c)` extents of the image feature grid.
        image_positional_encoding (bool): Whether the flattened image sequence gets positional encodings.
    """
    num_layers: int = 2
    n_head: int = 4
    d_model: int = 64
    dff: int = 128
    dropout: float = 0.1
    vocab_size: int = 512
    max_len: int = 128
    image_grid: tuple = (7, 7, 16)
    image_positional_encoding: bool = True

    _PRESET_FIELDS = {
        "num_layers": "NUM_LAYERS",
        "n_head": "N_HEAD",
        "d_model": "D_MODEL",
        "dff": "DFF",
        "dropout": "DROPOUT",
        "vocab_size": "VOCAB_SIZE",
        "max_len": "MAX_LEN",
        "image_grid": "IMAGE_GRID",
        "image_positional_encoding": "IMAGE_POSITIONAL_ENCODING",
    }

    def __post_init__(self):
        self._coerce(
            num_layers=int, n_head=int, d_model=int, dff=int, vocab_size=int, max_len=int,
            dropout=float, image_grid=_extents, image_positional_encoding=_flag,
        )

        for name in ("num_layers", "n_head", "d_model", "dff", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive count, got {getattr(self, name)}")
        if self.d_model % self.n_head != 0:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_head={self.n_head}")
        if self.max_len < 2:
            raise ConfigError(f"max_len must be at least 2, got {self.max_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if len(self.image_grid) != 3 or min(self.image_grid) < 1:
            raise ConfigError(f"image_grid must be three positive extents, got {self.image_grid}")

    @property
    def head_dim(self):
        return self.d_model // self.n_head

    @property
    def image_length(self):
        h, w, _ = self.image_grid
        return h * w


@dataclass(frozen=True)
class TrainConfig(_ConfigRecord):
    """
    Optimisation settings for teacher-forcing training.

    Attributes:
        learning_rate (float): Adam step size.
        batch_size (int): Samples per optimizer step.
        epochs (int): Passes over the training split.
        seed (int): Seed of the shuffle and dropout generator.
        beta1 (float): Adam first-moment decay.
        beta2 (float): Adam second-moment decay.
        eps (float): Adam denominator guard.
        clip_norm (float, optional): Global gradient-norm ceiling, `None` disables clipping.
        select_best (bool): Keep the epoch with the lowest validation loss instead of the last one.
    """
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = 1.0
    select_best: bool = False

    _PRESET_FIELDS = {
        "learning_rate": "LEARNING_RATE",
        "batch_size": "BATCH_SIZE",
        "epochs": "EPOCHS",
        "seed": "SEED",
        "beta1": "ADAM_BETA1",
        "beta2": "ADAM_BETA2",
        "eps": "ADAM_EPS",
        "clip_norm": "CLIP_NORM",
        "select_best": "SELECT_BEST",
    }

    def __post_init__(self):
        self._coerce(
            learning_rate=float, batch_size=int, epochs=int, seed=int, beta1=float, beta2=float, eps=float,
            clip_norm=_optional(float), select_best=_flag,
        )
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must not be negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must not be negative, got {self.epochs}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive or null, got {self.clip_norm}")


@dataclass(frozen=True)
class GeneratorConfig(_ConfigRecord):
    """
    Settings of the synthetic (image grid, report, labels) generator.

    Attributes:
        seed (int): Root seed; sample `i` draws from a generator seeded with `(seed, i)`.
        n_samples (int): Number of samples to emit.
        grid (tuple): `(h, w, c)` extents of each feature grid.
        prevalences (dict): Finding id to Bernoulli probability of presence.
        template_variants (int): How many phrasing variants per finding are in play.
        noise (float): Standard deviation of the additive Gaussian noise.
        amplitude (float): Height of a finding's blob on its region and channels.
        shared_channels (bool): All findings raise every channel, so only location tells them apart.
        regions (dict, optional): Finding id to list of `[row, col]` cells; a default layout is used when absent.
    """
    seed: int = 0
    n_samples: int = 200
    grid: tuple = (7, 7, 16)
    prevalences: dict = field(default_factory=lambda: {
        "cardiomegaly": 0.22,
        "edema": 0.18,
        "consolidation": 0.05,
        "atelectasis": 0.25,
        "pleural_effusion": 0.26,
    })
    template_variants: int = 3
    noise: float = 0.5
    amplitude: float = 2.0
    shared_channels: bool = True
    regions: Optional[dict] = None

    def __post_init__(self):
        self._coerce(
            seed=int, n_samples=int, grid=_extents, template_variants=int, noise=float, amplitude=float,
            shared_channels=_flag, prevalences=lambda value: {str(k): float(v) for k, v in dict(value).items()},
        )

        if self.n_samples < 0:
            raise ConfigError(f"n_samples must not be negative, got {self.n_samples}")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ConfigError(f"grid must be three positive extents, got {self.grid}")
        for finding_id, prevalence in self.prevalences.items():
            if not 0.0 <= prevalence <= 1.0:
                raise ConfigError(f"prevalence of {finding_id} must lie in [0, 1], got {prevalence}")
        if self.template_variants < 1:
            raise ConfigError(f"template_variants must be at least 1, got {self.template_variants}")
        if self.noise < 0:
            raise ConfigError(f"noise must not be negative, got {self.noise}")


@dataclass
class Sample:
    """
    One image-text training pair.

    Attributes:
        id (str): Stable sample identifier.
        image (np.ndarray): Feature grid of shape `(h, w, c)`.
        report (str): Ground-truth report text.
        labels (tuple): Sorted finding ids present in the image.
        split (str): `train`, `validate` or `test`.
        token_ids (tuple, optional): Encoded report with BOS/EOS, filled once a vocab exists.
    """
    id: str
    image: np.ndarray
    report: str
    labels: tuple = ()
    split: str = "train"
    token_ids: Optional[tuple] = None


@dataclass(frozen=True)
class EvalPair:
    """A generated report and the reference reports it is scored against."""
    candidate: str
    references: tuple
    id: str = ""

    def __post_init__(self):
        if not self.references:
            raise ConfigError(f"evaluation pair {self.id!r} has no references")
        object.__setattr__(self, "references", tuple(self.references))


@dataclass(frozen=True)
class RunManifest:
    """
    Everything needed to reproduce one CLI output.

    Attributes:
        command (tuple): The command line that produced the output.
        seed (int, optional): Seed in effect.
        tool_version (str): Package version.
        config (str, optional): Path of the JSON config used.
        vocab (str, optional): Path of the vocab file used.
        checkpoint (str, optional): Path of the checkpoint used.
        dataset (str, optional): Path of the dataset used.
    """
    command: tuple
    tool_version: str
    seed: Optional[int] = None
    config: Optional[str] = None
    vocab: Optional[str] = None
    checkpoint: Optional[str] = None
    dataset: Optional[str] = None

    def __post_init__(self):
        for name in ("config", "vocab", "checkpoint", "dataset"):
            path = getattr(self, name)
            if path is not None and not os.path.exists(path):
                raise MissingPathError(path, path=path)

    @classmethod
    def capture(cls, tool_version, **paths):
        return cls(command=tuple(sys.argv), tool_version=tool_version, **paths)

    def to_dict(self):
        payload = dataclasses.asdict(self)
        payload["command"] = list(self.command)
        return payload
