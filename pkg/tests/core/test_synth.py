import dataclasses
import json

import numpy as np
import pytest

from config import DeskConfig
from errors import ConfigError, FileFormatError, LayoutError, MissingPathError
from reportgen.core.decoder import attention_map_for_token, generate_many, region_attention_mass
from reportgen.core.labeler import NORMAL_SENTENCE, classification_report, default_ontology, label_report
from reportgen.core.synth import (
    default_regions,
    finding_channels,
    generate,
    load_dataset,
    region_threshold_accuracy,
    resolve_regions,
    split,
)
from reportgen.core.tokenizer import END_OF_WORD, BpeTokenizer
from reportgen.core.trainer import Trainer, attach_token_ids, evaluate_loss
from reportgen.core.transformer import ModelParams
from reportgen.models import GeneratorConfig, ModelConfig, TrainConfig


class TestGenerate:
    """
    Test suite for `generate()`.
    """

    def test_zero_prevalence_gives_normal_reports(self, ontology):
        """
        GIVEN every prevalence at 0
        WHEN samples are generated
        THEN each report is the normal sentence with no labels.
        """
        config = GeneratorConfig(seed=1, n_samples=20, prevalences={fid: 0.0 for fid in ontology.ids})
        for sample in generate(config, ontology):
            assert sample.report == NORMAL_SENTENCE
            assert sample.labels == ()

    def test_full_prevalence_mentions_every_finding(self, ontology):
        """
        GIVEN one finding at prevalence 1 and the rest at 0
        WHEN samples are generated
        THEN every report labels as exactly that finding.
        """
        prevalences = {fid: 0.0 for fid in ontology.ids}
        prevalences["edema"] = 1.0
        config = GeneratorConfig(seed=1, n_samples=20, prevalences=prevalences)
        for sample in generate(config, ontology):
            assert sample.labels == ("edema",)
            assert label_report(sample.report, ontology) == {"edema"}

    def test_same_seed_same_samples(self, generator_config, ontology):
        """
        GIVEN the same config twice
        WHEN samples are generated
        THEN ids, reports, labels and grids are identical.
        """
        first, second = generate(generator_config, ontology), generate(generator_config, ontology)
        for a, b in zip(first, second):
            assert (a.id, a.report, a.labels) == (b.id, b.report, b.labels)
            assert np.array_equal(a.image, b.image)

    def test_sample_depends_only_on_its_index(self, generator_config, ontology):
        """
        GIVEN a run of 40 samples and a run of 10
        WHEN the first ten are compared
        THEN they are identical.
        """
        short = generate(dataclasses.replace(generator_config, n_samples=10), ontology)
        for a, b in zip(short, generate(generator_config, ontology)):
            assert a.report == b.report
            assert np.array_equal(a.image, b.image)

    def test_noise_free_grid_marks_regions(self, ontology):
        """
        GIVEN zero noise and only cardiomegaly present
        WHEN a sample is generated
        THEN exactly its cells and channels carry the amplitude.
        """
        prevalences = {fid: 0.0 for fid in ontology.ids}
        prevalences["cardiomegaly"] = 1.0
        config = GeneratorConfig(seed=0, n_samples=1, noise=0.0, amplitude=2.0, prevalences=prevalences)
        image = generate(config, ontology)[0].image

        expected = np.zeros(config.grid)
        channels = finding_channels(0, len(ontology), 16)
        for r, c in default_regions(7, 7)["cardiomegaly"]:
            expected[r, c, channels] = 2.0
        assert np.array_equal(image, expected)

    def test_findings_share_channels_by_default(self, ontology):
        """
        GIVEN zero noise and every finding present
        WHEN a sample is generated with the default config and with separate channels
        THEN by default every region cell is raised on all channels, otherwise on its finding's stripe only.
        """
        prevalences = {fid: 1.0 for fid in ontology.ids}
        shared = GeneratorConfig(seed=0, n_samples=1, noise=0.0, prevalences=prevalences)
        separate = dataclasses.replace(shared, shared_channels=False)

        regions = default_regions(7, 7)
        shared_image = generate(shared, ontology)[0].image
        separate_image = generate(separate, ontology)[0].image
        for k, finding_id in enumerate(ontology.ids):
            for r, c in regions[finding_id]:
                assert np.array_equal(shared_image[r, c], np.full(16, shared.amplitude))
                stripe = np.zeros(16)
                stripe[finding_channels(k, len(ontology), 16, shared=False)] = separate.amplitude
                assert np.array_equal(separate_image[r, c], stripe)

    def test_prevalences_must_match_ontology(self, ontology):
        """
        GIVEN prevalences missing a finding
        WHEN samples are generated
        THEN a config error is raised.
        """
        with pytest.raises(ConfigError):
            generate(GeneratorConfig(prevalences={"edema": 0.5}), ontology)

    def test_threshold_separates_findings(self, ontology):
        """
        GIVEN 400 samples with default noise and amplitude
        WHEN a threshold classifier reads each finding's region
        THEN every finding is recovered with accuracy above 0.95.
        """
        config = GeneratorConfig(seed=3, n_samples=400)
        accuracies = region_threshold_accuracy(generate(config, ontology), config, ontology)
        assert set(accuracies) == set(ontology.ids)
        assert min(accuracies.values()) > 0.95


class TestRegions:
    """
    Test suite for the region layout.
    """

    def test_default_layout_is_disjoint(self):
        """
        GIVEN the default 7x7 layout
        WHEN its regions are collected
        THEN no cell is claimed twice and every finding has cells.
        """
        regions = default_regions(7, 7)
        cells = [cell for region in regions.values() for cell in region]
        assert len(cells) == len(set(cells))
        assert all(regions.values())

    def test_default_regions_have_equal_area(self):
        """
        GIVEN the default 7x7 layout
        WHEN region sizes are compared
        THEN every finding covers six cells.
        """
        assert {len(cells) for cells in default_regions(7, 7).values()} == {6}

    def test_overlapping_regions(self, ontology):
        """
        GIVEN two findings claiming the same cell
        WHEN regions are resolved
        THEN a layout error is raised.
        """
        regions = {fid: [[i, 0]] for i, fid in enumerate(ontology.ids)}
        regions["edema"] = [[0, 0]]
        with pytest.raises(LayoutError):
            resolve_regions(GeneratorConfig(regions=regions), ontology)

    def test_cell_outside_grid(self, ontology):
        """
        GIVEN a cell beyond the grid
        WHEN regions are resolved
        THEN a layout error is raised.
        """
        regions = {fid: [[i, 0]] for i, fid in enumerate(ontology.ids)}
        regions["edema"] = [[9, 9]]
        with pytest.raises(LayoutError):
            resolve_regions(GeneratorConfig(regions=regions), ontology)


class TestSplit:
    """
    Test suite for `split()`.
    """

    def test_sizes_and_disjointness(self, generator_config, ontology):
        """
        GIVEN 40 samples and ratios 0.8/0.1/0.1
        WHEN they are split
        THEN the parts hold 32/4/4 disjoint samples covering everything.
        """
        samples = generate(generator_config, ontology)
        train, validate, test = split(samples, (0.8, 0.1, 0.1), seed=5)

        assert (len(train), len(validate), len(test)) == (32, 4, 4)
        ids = [s.id for part in (train, validate, test) for s in part]
        assert sorted(ids) == sorted(s.id for s in samples)
        assert {s.split for s in validate} == {"validate"}

    def test_same_seed_same_split(self, generator_config, ontology):
        """
        GIVEN the same seed twice
        WHEN samples are split
        THEN the parts are identical.
        """
        samples = generate(generator_config, ontology)
        first = [[s.id for s in part] for part in split(samples, seed=2)]
        second = [[s.id for s in part] for part in split(samples, seed=2)]
        assert first == second

    def test_bad_ratios(self, synthetic_samples):
        """
        GIVEN ratios that do not sum to 1
        WHEN samples are split
        THEN a config error is raised.
        """
        with pytest.raises(ConfigError):
            split(synthetic_samples, (0.5, 0.1, 0.1))


class TestDatasetFile:
    """
    Test suite for `save_dataset()` and `load_dataset()`.
    """

    def test_round_trip(self, dataset_file, synthetic_samples):
        """
        GIVEN saved samples
        WHEN the file is loaded
        THEN ids, splits, labels, reports and grids are exact.
        """
        loaded = load_dataset(dataset_file)
        assert len(loaded) == len(synthetic_samples)
        for a, b in zip(loaded, synthetic_samples):
            assert (a.id, a.split, a.labels, a.report) == (b.id, b.split, b.labels, b.report)
            assert np.array_equal(a.image, b.image)

    def test_extents_mismatch(self, tmp_path):
        """
        GIVEN a record whose features do not fill its extents
        WHEN the file is loaded
        THEN a file-format error names line 1.
        """
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"id": "a", "extents": [2, 2, 1], "features": [0.0], "report": ""}) + "\n")
        with pytest.raises(FileFormatError) as e:
            load_dataset(path)
        assert e.value.offset == 1

    def test_missing_file(self, tmp_path):
        """
        GIVEN no dataset on disk
        WHEN it is loaded
        THEN a missing-path error is raised.
        """
        with pytest.raises(MissingPathError):
            load_dataset(tmp_path / "none.jsonl")


@pytest.mark.slow
class TestLearnability:
    """
    Training on a full-size synthetic set.
    """

    def test_held_out_loss_drops(self, ontology):
        """
        GIVEN 2000 generated samples
        WHEN a small model trains for three epochs
        THEN the held-out test loss falls below that of the initial weights.
        """
        config = GeneratorConfig(seed=0, n_samples=2000)
        samples = generate(config, ontology)
        train, _, test = split(samples, seed=0)

        tokenizer = BpeTokenizer.train([s.report for s in train], 256)
        model_config = ModelConfig(vocab_size=len(tokenizer), max_len=64, image_grid=config.grid)
        attach_token_ids(samples, tokenizer, model_config.max_len)
        train_config = TrainConfig(epochs=3, batch_size=32, learning_rate=1e-3)

        before = evaluate_loss(test, ModelParams.initialize(model_config, train_config.seed), model_config)
        trainer = Trainer(model_config, train_config)
        trainer.fit(train)
        after = evaluate_loss(test, trainer.params, model_config)
        assert after.mean_loss < before.mean_loss


@pytest.fixture(scope="module")
def desk_run():
    """
    A desk-preset model trained on 2000 generated samples split 80/10/10, with greedy reports for the test part.

    Returns a dict with `generator`, `ontology`, `tokenizer`, `test` samples and their `results`.
    """
    ontology = default_ontology()
    generator = GeneratorConfig(seed=0, n_samples=2000)
    samples = generate(generator, ontology)
    train, validate, test = split(samples, (0.8, 0.1, 0.1), seed=0)

    tokenizer = BpeTokenizer.train([s.report for s in train], DeskConfig.VOCAB_SIZE)
    model_config = ModelConfig.from_object(DeskConfig, vocab_size=len(tokenizer), image_grid=generator.grid)
    attach_token_ids(samples, tokenizer, model_config.max_len)

    trainer = Trainer(model_config, TrainConfig.from_object(DeskConfig))
    trainer.fit(train, validate)
    results = generate_many([s.image for s in test], trainer.params, model_config, tokenizer, workers=4)
    return {
        "generator": generator,
        "ontology": ontology,
        "tokenizer": tokenizer,
        "test": test,
        "results": results,
    }


def finding_token_positions(result, tokenizer, ontology):
    """
    Maps each finding to the generated positions of the sentences that mention it and nothing else.
    """
    positions = {}
    sentence = []
    for t, token in enumerate(tokenizer.tokens(result.token_ids)):
        sentence.append(t)
        if token.replace(END_OF_WORD, "") != ".":
            continue
        found = label_report(tokenizer.decode([result.token_ids[i] for i in sentence]), ontology)
        if len(found) == 1:
            positions.setdefault(found.pop(), []).extend(sentence)
        sentence = []
    return positions


@pytest.mark.slow
class TestMemorization:
    """
    End-to-end memorization of a small generated corpus with the desk preset.
    """

    def test_reproduces_training_reports(self, ontology):
        """
        GIVEN 32 generated samples and the desk preset
        WHEN the model trains for up to 300 epochs
        THEN eval-mode loss on the corpus is below 0.05 and at least 30 of 32 reports come back token-exactly.
        """
        samples = generate(GeneratorConfig(seed=0, n_samples=32), ontology)
        tokenizer = BpeTokenizer.train([s.report for s in samples], DeskConfig.VOCAB_SIZE)
        model_config = ModelConfig.from_object(DeskConfig, vocab_size=len(tokenizer))
        attach_token_ids(samples, tokenizer, model_config.max_len)

        trainer = Trainer(model_config, TrainConfig.from_object(DeskConfig, epochs=300))
        trainer.fit(samples)
        assert evaluate_loss(samples, trainer.params, model_config).mean_loss < 0.05

        results = generate_many([s.image for s in samples], trainer.params, model_config, tokenizer)
        exact = sum(result.token_ids == list(s.token_ids[1:]) for result, s in zip(results, samples))
        assert exact >= 30


@pytest.mark.slow
class TestGeneralization:
    """
    Held-out behaviour of a desk-preset model trained on 2000 generated samples.
    """

    def test_labeler_f1_on_generated_reports(self, desk_run):
        """
        GIVEN greedy reports for the held-out test part
        WHEN the labeler scores them against the generator's labels
        THEN every finding with prevalence of at least 0.15 reaches F1 0.90 and consolidation scores strictly lowest.
        """
        ontology = desk_run["ontology"]
        predicted = [label_report(result.text, ontology) for result in desk_run["results"]]
        truth = [set(s.labels) for s in desk_run["test"]]
        per_finding = classification_report(predicted, truth, ontology.ids)["per_finding"]

        prevalences = desk_run["generator"].prevalences
        for finding_id in ontology.ids:
            if prevalences[finding_id] >= 0.15:
                assert per_finding[finding_id]["f1"] >= 0.90, finding_id
        others = [per_finding[f]["f1"] for f in ontology.ids if f != "consolidation"]
        assert per_finding["consolidation"]["f1"] < min(others)

    def test_attention_favours_the_mentioned_region(self, desk_run):
        """
        GIVEN the attention traces of the held-out reports
        WHEN mass is averaged per finding over the tokens of sentences mentioning only that finding
        THEN the mass inside the finding's own region exceeds the mass inside every other finding's region.
        """
        ontology, tokenizer = desk_run["ontology"], desk_run["tokenizer"]
        regions = resolve_regions(desk_run["generator"], ontology)

        masses = {f: {g: [] for g in ontology.ids} for f in ontology.ids}
        for result in desk_run["results"]:
            for finding_id, positions in finding_token_positions(result, tokenizer, ontology).items():
                for t in positions:
                    attention_map = attention_map_for_token(result.trace, t)
                    for region_id in ontology.ids:
                        masses[finding_id][region_id].append(region_attention_mass(attention_map, regions[region_id]))

        mentioned = [f for f in ontology.ids if masses[f][f]]
        prevalences = desk_run["generator"].prevalences
        assert {f for f in ontology.ids if prevalences[f] >= 0.15} <= set(mentioned)
        for finding_id in mentioned:
            own = np.mean(masses[finding_id][finding_id])
            for region_id in ontology.ids:
                if region_id != finding_id:
                    assert own > np.mean(masses[finding_id][region_id]), (finding_id, region_id)
