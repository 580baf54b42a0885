import pytest

from errors import FileFormatError, LayoutError, LengthMismatchError
from reportgen.core.labeler import (
    NORMAL_SENTENCE,
    Finding,
    FindingOntology,
    class_bias,
    classification_report,
    label_report,
    load_ontology,
    save_ontology,
)


class TestLabelReport:
    """
    Test suite for `label_report()`.
    """

    @pytest.mark.parametrize("text, expected", [
        ("Small left pleural effusion.", {"pleural_effusion"}),
        ("No pleural effusion.", set()),
        ("There is no pleural effusion. There is moderate cardiomegaly.", {"cardiomegaly"}),
        ("Lungs are free of consolidation.", set()),
        ("Negative for focal opacity.", set()),
        ("Without interstitial edema.", set()),
        (NORMAL_SENTENCE, set()),
        ("", set()),
    ])
    def test_mentions_and_negations(self, ontology, text, expected):
        """
        GIVEN a report
        WHEN it is labeled
        THEN exactly the non-negated findings are returned.
        """
        assert label_report(text, ontology) == expected

    def test_negation_stops_at_sentence_boundary(self, ontology):
        """
        GIVEN a negation cue in the previous sentence
        WHEN the report is labeled
        THEN the mention in the next sentence stays positive.
        """
        assert label_report("no acute process. effusion.", ontology) == {"pleural_effusion"}

    def test_negation_window(self, ontology):
        """
        GIVEN a cue within four tokens and another beyond four tokens of the mention
        WHEN each report is labeled
        THEN only the near cue negates.
        """
        assert label_report("no evidence of focal consolidation.", ontology) == set()
        assert label_report("no change since prior and new consolidation.", ontology) == {"consolidation"}

    def test_one_positive_mention_is_enough(self, ontology):
        """
        GIVEN a negated and a later affirmed mention of the same finding
        WHEN the report is labeled
        THEN the finding is positive.
        """
        assert label_report("no effusion on the left. a right effusion is present.", ontology) == {"pleural_effusion"}

    def test_negation_insensitive_finding(self):
        """
        GIVEN a finding that ignores negation
        WHEN a negated mention is labeled
        THEN the finding is still positive.
        """
        ontology = FindingOntology([Finding("device", "Device", ("pacemaker",), negation_sensitive=False)])
        assert label_report("no pacemaker.", ontology) == {"device"}

    def test_agrees_with_generator(self, ontology, synthetic_samples):
        """
        GIVEN generated samples
        WHEN each report is labeled
        THEN the labels equal the finding vector the report was built from.
        """
        for sample in synthetic_samples:
            assert label_report(sample.report, ontology) == set(sample.labels)


class TestClassificationReport:
    """
    Test suite for `classification_report()` and `class_bias()`.
    """

    def test_perfect_predictions(self, ontology):
        """
        GIVEN predictions equal to the truth
        WHEN the report is computed
        THEN every finding with support scores 1 and accuracy is 1.
        """
        truth = [{"edema"}, {"cardiomegaly", "edema"}, set()]
        report = classification_report(truth, truth, ontology.ids)
        assert report["per_finding"]["edema"]["f1"] == 1.0
        assert report["per_finding"]["cardiomegaly"]["precision"] == 1.0
        assert report["accuracy"] == 1.0

    def test_all_negative_predictions(self, ontology):
        """
        GIVEN no predicted labels
        WHEN the report is computed
        THEN precision, recall and F1 are 0 and accuracy is one minus prevalence.
        """
        truth = [{"edema"}, set(), set(), {"edema"}]
        scores = classification_report([set()] * 4, truth, ontology.ids)["per_finding"]["edema"]
        assert (scores["precision"], scores["recall"], scores["f1"]) == (0.0, 0.0, 0.0)
        assert scores["accuracy"] == pytest.approx(1.0 - scores["prevalence"])
        assert scores["prevalence"] == 0.5

    def test_counts_against_hand_computation(self):
        """
        GIVEN six samples with TP=2, FP=1, FN=1, TN=2 for one finding
        WHEN the report is computed
        THEN precision, recall and F1 are 2/3 and accuracy is 4/6.
        """
        truth = [{"edema"}, {"edema"}, {"edema"}, set(), set(), set()]
        pred = [{"edema"}, {"edema"}, set(), {"edema"}, set(), set()]
        scores = classification_report(pred, truth, ["edema"])["per_finding"]["edema"]

        assert scores["precision"] == pytest.approx(2 / 3)
        assert scores["recall"] == pytest.approx(2 / 3)
        assert scores["f1"] == pytest.approx(2 / 3)
        assert scores["accuracy"] == pytest.approx(4 / 6)
        assert scores["support"] == 3

    def test_length_mismatch(self, ontology):
        """
        GIVEN label lists of different length
        WHEN the report is computed
        THEN a length-mismatch error is raised.
        """
        with pytest.raises(LengthMismatchError):
            classification_report([set()], [set(), set()], ontology.ids)

    def test_class_bias(self):
        """
        GIVEN four samples, one with edema
        WHEN class bias is measured
        THEN edema has prevalence 0.25 and atelectasis 0.
        """
        bias = class_bias([{"edema"}, set(), set(), set()], ["edema", "atelectasis"])
        assert bias == {"edema": 0.25, "atelectasis": 0.0}


class TestOntology:
    """
    Test suite for `FindingOntology` and its file format.
    """

    def test_default_ontology(self, ontology):
        """
        GIVEN the built-in ontology
        WHEN it is inspected
        THEN it holds five findings, each with three templates that label as that finding.
        """
        assert len(ontology) == 5
        for finding in ontology:
            assert len(finding.templates) == 3
            for template in finding.templates:
                assert label_report(template, ontology) == {finding.id}

    def test_shared_phrase(self):
        """
        GIVEN two findings sharing a phrase
        WHEN the ontology is built
        THEN a layout error is raised.
        """
        with pytest.raises(LayoutError):
            FindingOntology([Finding("a", "A", ("opacity",)), Finding("b", "B", ("Opacity",))])

    def test_empty_phrases(self):
        """
        GIVEN a finding without phrases
        WHEN the ontology is built
        THEN a layout error is raised.
        """
        with pytest.raises(LayoutError):
            FindingOntology([Finding("a", "A", ())])

    def test_duplicate_ids(self):
        """
        GIVEN two findings with the same id
        WHEN the ontology is built
        THEN a layout error is raised.
        """
        with pytest.raises(LayoutError):
            FindingOntology([Finding("a", "A", ("x",)), Finding("a", "B", ("y",))])

    def test_save_load_round_trip(self, tmp_path, ontology):
        """
        GIVEN the built-in ontology
        WHEN it is saved and loaded
        THEN the findings are equal.
        """
        path = tmp_path / "ontology.jsonl"
        save_ontology(path, ontology)
        assert list(load_ontology(path)) == list(ontology)

    def test_malformed_record(self, tmp_path):
        """
        GIVEN a record without phrases
        WHEN the file is loaded
        THEN a file-format error names line 1.
        """
        path = tmp_path / "ontology.jsonl"
        path.write_text('{"id": "a"}\n', encoding="utf-8")
        with pytest.raises(FileFormatError) as e:
            load_ontology(path)
        assert e.value.offset == 1
