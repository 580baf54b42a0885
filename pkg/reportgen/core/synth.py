"""
Procedural (feature grid, report, labels) generator.

Grids stand in for post-CNN image features. Every finding owns a fixed set of
grid cells; when the finding is present, its cells are raised by `amplitude`
on its channels on top of Gaussian noise, and the report mentions it with one
of its template sentences. By default all findings share the same channels, so
a finding can only be told apart by where its blob sits.
"""
import json
import logging

import numpy as np

from errors import ConfigError, FileFormatError, LayoutError, MissingPathError
from reportgen.core.labeler import NORMAL_SENTENCE
from reportgen.models import Sample

logger = logging.getLogger(__name__)

SPLITS = ("train", "validate", "test")

# cells on the 7x7 reference layout, (first_row, last_row, first_col, last_col) inclusive;
# every finding covers six cells
_REFERENCE_LAYOUT = {
    "cardiomegaly": [(3, 4, 2, 4)],
    "edema": [(0, 1, 2, 4)],
    "consolidation": [(2, 4, 0, 1)],
    "atelectasis": [(2, 4, 5, 6)],
    "pleural_effusion": [(6, 6, 0, 2), (6, 6, 4, 6)],
}
_REFERENCE_EXTENT = 7


def default_regions(h, w):
    """
    The reference 7x7 layout projected onto an `h x w` grid.

    A cell `(r, c)` belongs to a finding when its projection
    `(r * 7 // h, c * 7 // w)` falls inside one of the finding's reference blocks.
    """
    regions = {finding_id: [] for finding_id in _REFERENCE_LAYOUT}
    for r in range(h):
        for c in range(w):
            ref_r, ref_c = r * _REFERENCE_EXTENT // h, c * _REFERENCE_EXTENT // w
            for finding_id, blocks in _REFERENCE_LAYOUT.items():
                if any(r0 <= ref_r <= r1 and c0 <= ref_c <= c1 for r0, r1, c0, c1 in blocks):
                    regions[finding_id].append((r, c))
    return regions


def resolve_regions(config, ontology):
    """
    Validated cell regions for every finding of the ontology.

    Raises:
        LayoutError: If a cell lies outside the grid, regions overlap, or a finding has no region.
    """
    h, w, _ = config.grid
    if config.regions is not None:
        regions = {fid: [tuple(cell) for cell in cells] for fid, cells in config.regions.items()}
    else:
        regions = default_regions(h, w)

    owners = {}
    for finding_id in ontology.ids:
        if finding_id not in regions:
            raise LayoutError(f"finding {finding_id} has no region")
        if not regions[finding_id]:
            logger.warning(f"Finding {finding_id} covers no cell of a {h}x{w} grid")
        for cell in regions[finding_id]:
            r, c = cell
            if not (0 <= r < h and 0 <= c < w):
                raise LayoutError(f"cell {cell} of {finding_id} lies outside the {h}x{w} grid")
            if cell in owners and owners[cell] != finding_id:
                raise LayoutError(f"cell {cell} is claimed by both {owners[cell]} and {finding_id}")
            owners[cell] = finding_id
    return {finding_id: regions[finding_id] for finding_id in ontology.ids}


def finding_channels(index, n_findings, depth, shared=True):
    """
    Channels raised by the `index`-th finding.

    Shared channels are all `depth` of them; otherwise the finding gets
    `index, index + n_findings, ...` below `depth`.
    """
    if shared:
        return list(range(depth))
    return list(range(index % depth, depth, n_findings))


def generate(config, ontology):
    """
    Draws `config.n_samples` samples.

    Sample `i` depends only on `(config.seed, i)`: presence is an independent
    Bernoulli draw per finding, then noise, then one template per present
    finding, then a shuffle of the sentences.

    Args:
        config (GeneratorConfig): Generator settings.
        ontology (FindingOntology): Findings, phrases and templates.

    Returns:
        list[Sample]: Samples with sorted label tuples and split `train`.

    Raises:
        ConfigError: If ontology ids and configured prevalences differ, or a finding has no template.
        LayoutError: If finding regions are invalid.
    """
    if set(ontology.ids) != set(config.prevalences):
        raise ConfigError(
            f"ontology findings {sorted(ontology.ids)} do not match prevalences {sorted(config.prevalences)}"
        )
    for finding in ontology:
        if not finding.templates:
            raise ConfigError(f"finding {finding.id} has no report templates")

    regions = resolve_regions(config, ontology)
    depth = config.grid[2]
    channels = {
        f.id: finding_channels(k, len(ontology), depth, config.shared_channels) for k, f in enumerate(ontology)
    }

    samples = []
    for index in range(config.n_samples):
        rng = np.random.default_rng([config.seed, index])
        draws = rng.random(len(ontology))
        present = [f for f, draw in zip(ontology, draws) if draw < config.prevalences[f.id]]

        image = rng.normal(0.0, config.noise, size=config.grid) if config.noise > 0 else np.zeros(config.grid)
        for finding in present:
            for r, c in regions[finding.id]:
                image[r, c, channels[finding.id]] += config.amplitude

        sentences = []
        for finding in present:
            variants = finding.templates[:config.template_variants]
            sentences.append(variants[int(rng.integers(len(variants)))])
        if sentences:
            report = " ".join(sentences[i] for i in rng.permutation(len(sentences)))
        else:
            report = NORMAL_SENTENCE

        samples.append(Sample(
            id=f"s{index:05d}",
            image=image,
            report=report,
            labels=tuple(sorted(f.id for f in present)),
        ))

    logger.info(f"Generated {len(samples)} samples on a {config.grid} grid")
    return samples


def split(samples, ratios=(0.8, 0.1, 0.1), seed=0):
    """
    Seeded disjoint partition into train, validate and test.

    Part sizes are rounded from the ratios, the test part takes the remainder;
    each part keeps the input order. Assigns `sample.split`.

    Raises:
        ConfigError: If the ratios are not three non-negative numbers summing to 1.
    """
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")

    total = len(samples)
    order = np.random.default_rng(seed).permutation(total)
    n_train = int(round(ratios[0] * total))
    n_validate = min(int(round(ratios[1] * total)), total - n_train)
    bounds = (0, n_train, n_train + n_validate, total)

    parts = []
    for name, lo, hi in zip(SPLITS, bounds, bounds[1:]):
        part = [samples[i] for i in sorted(order[lo:hi])]
        for sample in part:
            sample.split = name
        parts.append(part)
    return tuple(parts)


def region_threshold_accuracy(samples, config, ontology):
    """
    Learnability check: a one-feature threshold classifier per finding.

    The feature is the mean intensity over the finding's cells and channels; the
    threshold is the midpoint of the two class means.

    Returns:
        dict: Finding id to threshold accuracy on `samples`.
    """
    regions = resolve_regions(config, ontology)
    depth = config.grid[2]
    accuracies = {}
    for k, finding in enumerate(ontology):
        cells = regions[finding.id]
        channels = finding_channels(k, len(ontology), depth, config.shared_channels)
        truth = np.array([finding.id in sample.labels for sample in samples])
        if not cells or not channels:
            accuracies[finding.id] = float(max(truth.mean(), 1 - truth.mean())) if len(truth) else 0.0
            continue

        rows, cols = zip(*cells)
        features = np.array([
            np.asarray(sample.image)[list(rows), list(cols)][:, channels].mean() for sample in samples
        ])
        if truth.all() or not truth.any():
            accuracies[finding.id] = 1.0
            continue
        threshold = (features[truth].mean() + features[~truth].mean()) / 2
        accuracies[finding.id] = float(((features > threshold) == truth).mean())
    return accuracies


def sample_to_record(sample):
    image = np.asarray(sample.image, dtype=np.float64)
    return {
        "id": sample.id,
        "extents": list(image.shape),
        "features": [float(v) for v in image.reshape(-1)],
        "report": sample.report,
        "labels": list(sample.labels),
        "split": sample.split,
    }


def save_dataset(path, samples):
    """Writes JSON-lines records `{id, extents, features, report, labels, split}`."""
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for sample in samples:
            handle.write(json.dumps(sample_to_record(sample)) + "\n")


def load_dataset(path):
    """
    Reads a dataset written by `save_dataset`.

    Raises:
        MissingPathError: If the file does not exist.
        FileFormatError: On a malformed record, naming the line number.
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.read().splitlines()
    except FileNotFoundError:
        raise MissingPathError(str(path), path=str(path))

    samples = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            extents = tuple(int(v) for v in record["extents"])
            features = np.array(record["features"], dtype=np.float64)
            if features.size != int(np.prod(extents)):
                raise ValueError(f"{features.size} features do not fill extents {extents}")
            split_name = record.get("split", "train")
            if split_name not in SPLITS:
                raise ValueError(f"unknown split {split_name!r}")
            samples.append(Sample(
                id=str(record["id"]),
                image=features.reshape(extents),
                report=record["report"],
                labels=tuple(record.get("labels", ())),
                split=split_name,
            ))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FileFormatError(f"line {number}: bad sample record ({e})", path=str(path), offset=number)
    return samples
