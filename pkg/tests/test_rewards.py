"""Reward engine: extraction chain, normalization rules, numeric matching,
task/format/total rewards, and their metamorphic invariances."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reag.core import Dataset, GroundTruth, QuestionKind, QuestionTask
from reag.rewards import (
    ExtractedAnswer,
    ExtractionPath,
    Matcher,
    NormalizedAnswer,
    extract_answer,
    format_reward,
    normalize,
    psi_num,
    score_output,
    split_answer_items,
    task_reward,
    total_reward,
)

ENTITY = QuestionTask(Dataset.INFOSEEK, QuestionKind.ENTITY)
TIME = QuestionTask(Dataset.INFOSEEK, QuestionKind.TIME)
NUMERICAL = QuestionTask(Dataset.INFOSEEK, QuestionKind.NUMERICAL)
SINGLE = QuestionTask(Dataset.EVQA, QuestionKind.SINGLE)
MULTI = QuestionTask(Dataset.EVQA, QuestionKind.MULTI)


def reward_of(output: str, alternatives, task: QuestionTask) -> int:
    score, _, _ = task_reward(extract_answer(output), GroundTruth(tuple(alternatives)), task)
    return score


class TestExtractionChain:
    def test_answer_tags(self):
        e = extract_answer("<think>x</think><answer>Paris</answer>")
        assert (e.extracted, e.extraction_path) == ("Paris", ExtractionPath.ANSWER_TAGS)

    def test_after_answer_open(self):
        e = extract_answer("<think>x</think><answer>42")
        assert (e.extracted, e.extraction_path) == ("42", ExtractionPath.AFTER_ANSWER_OPEN)

    def test_after_think_close(self):
        e = extract_answer("reasoning</think> seven")
        assert (e.extracted, e.extraction_path) == ("seven", ExtractionPath.AFTER_THINK_CLOSE)

    def test_whole_output(self):
        e = extract_answer("no tags at all")
        assert (e.extracted, e.extraction_path) == ("no tags at all", ExtractionPath.WHOLE_OUTPUT)

    def test_first_answer_span_wins(self):
        e = extract_answer("<answer>one</answer><answer>two</answer>")
        assert e.extracted == "one"

    def test_special_tokens_removed_everywhere(self):
        e = extract_answer("<answer>a<think>b</think>c")
        assert e.extraction_path == ExtractionPath.AFTER_ANSWER_OPEN
        assert e.extracted == "abc"

    def test_empty_span_yields_empty_string(self):
        e = extract_answer("<answer></answer>")
        assert e.extracted == "" and e.extraction_path == ExtractionPath.ANSWER_TAGS


class TestNormalize:
    def test_articles_punctuation_case(self):
        assert normalize("The Royal Albert Dock!").text == "royal albert dock"

    def test_whitespace_collapse(self):
        assert normalize("  a   b\t c ").text == "b c"

    def test_contractions_expand(self):
        assert normalize("It's a dock").text == "it is dock"
        assert normalize("don't know").text == "do not know"

    def test_number_words(self):
        assert normalize("seven").parsed_number == 7.0
        assert normalize("twenty").parsed_number == 20.0
        assert normalize("ninety").parsed_number == 90.0

    def test_interval_from_words(self):
        n = normalize("Three to four")
        assert n.parsed_interval == (3.0, 4.0)
        assert n.text == "3 to 4"
        assert n.parsed_number is None

    def test_interval_hyphen_form(self):
        assert normalize("3-4").parsed_interval == (3.0, 4.0)
        assert normalize("2015-2020").parsed_interval == (2015.0, 2020.0)

    def test_interval_between_form(self):
        n = normalize("between 3 and 4")
        assert n.parsed_interval == (3.0, 4.0)
        assert n.text == "3 to 4"

    def test_point_interval_degrades_to_scalar(self):
        n = normalize("3 to 3")
        assert n.parsed_number == 3.0 and n.parsed_interval is None

    def test_scalar_with_units(self):
        n = normalize("3.82 square kilometres")
        assert n.parsed_number == 3.82
        assert n.text == "3.82 square kilometres"

    def test_negative_scalar(self):
        assert normalize("-5 degrees").parsed_number == -5.0

    def test_plain_text_has_no_numeric_structure(self):
        n = normalize("royal albert dock")
        assert n.parsed_number is None and n.parsed_interval is None

    def test_mutual_exclusion_enforced(self):
        with pytest.raises(ValueError):
            NormalizedAnswer(text="x", parsed_number=1.0, parsed_interval=(1.0, 2.0))

    @settings(max_examples=300)
    @given(st.text(alphabet=st.characters(codec="ascii"), max_size=40))
    def test_idempotent(self, raw):
        once = normalize(raw)
        twice = normalize(once.text)
        assert twice == once

    @given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False))
    def test_scalar_round_trip(self, value):
        n = normalize(f"{value:.4f}")
        assert n.parsed_number == pytest.approx(value, abs=1e-4)


class TestPsiNum:
    def test_scalar_within_tolerance(self):
        assert psi_num(normalize("3.85"), normalize("3.82")) == 1

    def test_scalar_outside_tolerance(self):
        assert psi_num(normalize("3.95"), normalize("3.82")) == 0

    def test_tolerance_boundary_inclusive(self):
        # 0.2 - 0.1 is exactly the float64 0.1, probing the <= boundary.
        assert psi_num(normalize("0.2"), normalize("0.1")) == 1

    def test_scalar_in_interval(self):
        assert psi_num(normalize("3"), normalize("3 to 4")) == 1
        assert psi_num(normalize("5"), normalize("3 to 4")) == 0

    def test_interval_iou(self):
        # overlap 0.5, union 2.0 -> IoU 0.25 < 0.5
        assert psi_num(normalize("3 to 4"), normalize("3.5 to 5")) == 0
        # overlap 1, union 1.5 -> IoU 2/3 >= 0.5
        assert psi_num(normalize("3 to 4"), normalize("3 to 4.5")) == 1

    def test_interval_pred_scalar_gt_scores_zero(self):
        assert psi_num(normalize("3 to 4"), normalize("3.5")) == 0

    def test_text_pred_scores_zero(self):
        assert psi_num(normalize("around three-ish"), normalize("3")) == 0

    @given(st.floats(-100, 100), st.floats(-100, 100))
    def test_scalar_case_symmetric(self, a, b):
        na, nb = normalize(str(a)), normalize(str(b))
        assert psi_num(na, nb) == psi_num(nb, na)


class TestTaskReward:
    def test_exact_match_after_normalization(self):
        assert reward_of("<answer>royal albert dock</answer>", ["Royal Albert Dock"], ENTITY) == 1

    def test_exact_mismatch(self):
        assert reward_of("<answer>albert dock</answer>", ["Royal Albert Dock"], ENTITY) == 0

    def test_time_kind_uses_exact(self):
        score, matcher, _ = task_reward(
            extract_answer("<answer>December</answer>"), GroundTruth(("december",)), TIME
        )
        assert score == 1 and matcher is Matcher.EXACT

    def test_numerical_uses_psi(self):
        score, matcher, _ = task_reward(
            extract_answer("<answer>3.85</answer>"), GroundTruth(("3.82",)), NUMERICAL
        )
        assert score == 1 and matcher is Matcher.NUMERIC_SCALAR

    def test_numerical_interval_alternative(self):
        score, matcher, _ = task_reward(
            extract_answer("<answer>three</answer>"), GroundTruth(((3.0, 4.0),)), NUMERICAL
        )
        assert score == 1 and matcher is Matcher.SCALAR_IN_INTERVAL

    def test_multi_set_iou(self):
        # Items avoid articles, which normalization deletes outright.
        assert reward_of("<answer>x, y</answer>", ["x, y, z"], MULTI) == 1  # IoU 2/3
        assert reward_of("<answer>x</answer>", ["x, y, z"], MULTI) == 0      # IoU 1/3

    def test_multi_and_delimiter(self):
        assert reward_of(
            "<answer>Newgrange and Knowth and Dowth</answer>",
            ["newgrange, knowth, dowth"],
            MULTI,
        ) == 1

    def test_max_over_alternatives(self):
        score, _, matched = task_reward(
            extract_answer("<answer>brunswick</answer>"),
            GroundTruth(("Braunschweig", "Brunswick")),
            ENTITY,
        )
        assert score == 1 and matched == 1

    def test_adding_alternative_never_decreases(self):
        base = GroundTruth(("right",))
        extended = GroundTruth(("wrong", "right", "also wrong"))
        out = "<answer>right</answer>"
        assert reward_of(out, base.alternatives, ENTITY) <= reward_of(out, extended.alternatives, ENTITY)

    def test_empty_prediction_never_matches(self):
        assert reward_of("<answer></answer>", ["anything"], ENTITY) == 0

    @settings(max_examples=100)
    @given(
        st.sampled_from(["The ", "a ", "an ", ""]),
        st.sampled_from(["", "!", "?", ".", "..."]),
        st.booleans(),
    )
    def test_invariant_to_decoration(self, article, punct, upper):
        answer = "golden eagle"
        decorated = article + (answer.upper() if upper else answer) + punct
        assert reward_of(f"<answer>{decorated}</answer>", ["Golden Eagle"], ENTITY) == 1

    def test_set_iou_symmetric_in_item_order(self):
        a = split_answer_items("x, y, z")
        b = split_answer_items("z, x, y")
        assert a == b

    @settings(max_examples=150)
    @given(st.text(alphabet=st.characters(codec="ascii"), min_size=1, max_size=30))
    def test_exact_matcher_reflexive_after_normalization(self, raw):
        # Any answer whose normalization is non-empty must match itself.
        if not normalize(raw).text:
            return
        pred = ExtractedAnswer(raw, raw, ExtractionPath.WHOLE_OUTPUT)
        score, _, _ = task_reward(pred, GroundTruth((raw,)), ENTITY)
        assert score == 1


class TestFormatReward:
    def test_canonical_template(self):
        assert format_reward("<think>t</think><answer>a</answer>") == 1

    def test_whitespace_outside_tags_allowed(self):
        assert format_reward("  <think>t</think>\n<answer>a</answer>\n") == 1

    def test_missing_think_block(self):
        assert format_reward("<answer>a</answer>") == 0

    def test_two_answer_blocks(self):
        assert format_reward("<think>t</think><answer>a</answer><answer>b</answer>") == 0

    def test_text_outside_tags(self):
        assert format_reward("<think>t</think>x<answer>a</answer>") == 0
        assert format_reward("<think>t</think><answer>a</answer> trailing") == 0

    def test_wrong_order(self):
        assert format_reward("<answer>a</answer><think>t</think>") == 0

    def test_empty_blocks_still_conform(self):
        assert format_reward("<think></think><answer></answer>") == 1


class TestTotalReward:
    def test_published_weights(self):
        assert total_reward(1, 1, 1.0, 0.2) == 1.2
        assert total_reward(1, 0, 1.0, 0.2) == 1.0
        assert total_reward(0, 1, 1.0, 0.2) == 0.2
        assert total_reward(0, 0, 1.0, 0.2) == 0.0

    def test_image_is_exactly_four_values(self):
        image = {total_reward(t, f, 1.0, 0.2) for t in (0, 1) for f in (0, 1)}
        assert image == {0.0, 0.2, 1.0, 1.2}

    def test_zero_case_any_weights(self):
        assert total_reward(0, 0, 3.7, 9.9) == 0.0


class TestScoreOutput:
    def test_full_path(self):
        b = score_output(
            "<think>it is the dock</think><answer>Royal Albert Dock</answer>",
            GroundTruth(("royal albert dock",)),
            ENTITY,
        )
        assert (b.task, b.format, b.total) == (1, 1, 1.2)
        assert b.matcher is Matcher.EXACT and b.matched_alternative == 0

    def test_task_without_format(self):
        b = score_output("Royal Albert Dock", GroundTruth(("royal albert dock",)), ENTITY)
        assert (b.task, b.format, b.total) == (1, 0, 1.0)

    def test_breakdown_serializes(self):
        b = score_output("<answer>x</answer>", GroundTruth(("y",)), ENTITY)
        d = b.to_dict()
        assert d["task"] == 0 and d["matcher"] == "exact" and d["matched_alternative"] is None
