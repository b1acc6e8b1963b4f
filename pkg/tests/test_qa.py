"""QA prompt variants, knowledge budgeting, and answer parsing."""

from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from textkvqa.errors import EmptyOutputError, InvalidArgumentError
from textkvqa.kb import FactSentence
from textkvqa.linking import link
from textkvqa.lmm import MockLmm, MockPolicy
from textkvqa.qa import (
    KNOWLEDGE_WORD_BUDGET,
    PROMPT_VARIANTS,
    SUPPORT_INSTRUCTION,
    TRUNCATION_MARKER,
    QaRequest,
    answer,
    build_qa_prompt,
    join_knowledge,
    parse_answer,
)

GOLDENS = Path(__file__).parent / "goldens"
QUESTION = "Where are the headquarters of this business?"


def _fact(sentence, relation="instance_of"):
    return FactSentence(relation=relation, object="x", sentence=sentence)


class TestQaRequest:
    def test_variant_payload_matrix(self):
        with pytest.raises(InvalidArgumentError):
            QaRequest(image_ref="i", question=" ", variant="no_knowledge")
        with pytest.raises(InvalidArgumentError):
            QaRequest(image_ref="i", question="q", variant="bogus")
        with pytest.raises(InvalidArgumentError):
            QaRequest(image_ref="i", question="q", variant="knowledge_facts")
        with pytest.raises(InvalidArgumentError):
            QaRequest(image_ref="i", question="q", variant="entity_name_only")
        with pytest.raises(InvalidArgumentError):
            QaRequest(image_ref="i", question="q", variant="ocr_only")
        QaRequest(image_ref="i", question="q", variant="no_knowledge")
        QaRequest(image_ref="i", question="q", variant="ocr_only", ocr_text="")

    def test_variant_vocabulary(self):
        assert PROMPT_VARIANTS == (
            "no_knowledge",
            "ocr_only",
            "entity_name_only",
            "knowledge_facts",
        )


class TestJoinKnowledge:
    def test_whole_sentences_in_order(self):
        facts = (_fact("One two."), _fact("Three four five."))
        assert join_knowledge(facts) == "One two. Three four five."

    def test_budget_cuts_whole_sentences(self):
        facts = (_fact("a b c"), _fact("d e f"), _fact("g h i"))
        assert join_knowledge(facts, word_budget=6) == f"a b c d e f {TRUNCATION_MARKER}"
        assert join_knowledge(facts, word_budget=7) == f"a b c d e f {TRUNCATION_MARKER}"
        assert join_knowledge(facts, word_budget=9) == "a b c d e f g h i"

    def test_first_sentence_longer_than_budget_cut_at_word(self):
        facts = (_fact("w1 w2 w3 w4 w5"),)
        assert join_knowledge(facts, word_budget=3) == f"w1 w2 w3 {TRUNCATION_MARKER}"

    def test_empty_knowledge(self):
        assert join_knowledge(()) == ""

    def test_budget_validated(self):
        with pytest.raises(InvalidArgumentError):
            join_knowledge((), word_budget=0)

    def test_default_budget(self):
        assert KNOWLEDGE_WORD_BUDGET == 512


class TestPromptGoldens:
    def test_no_knowledge(self):
        request = QaRequest(image_ref="i", question=QUESTION, variant="no_knowledge")
        assert build_qa_prompt(request) == (GOLDENS / "qa_no_knowledge.txt").read_text("utf-8")

    def test_ocr_only(self):
        request = QaRequest(
            image_ref="i", question=QUESTION, variant="ocr_only", ocr_text="Domino's Pizza"
        )
        assert build_qa_prompt(request) == (GOLDENS / "qa_ocr_only.txt").read_text("utf-8")

    def test_entity_name_only(self):
        request = QaRequest(
            image_ref="i",
            question=QUESTION,
            variant="entity_name_only",
            entity_name="Domino's Pizza",
        )
        assert build_qa_prompt(request) == (GOLDENS / "qa_entity_name_only.txt").read_text(
            "utf-8"
        )

    def test_knowledge_facts(self, corpus):
        facts = corpus.kb.entity("biz_dominos").facts
        request = QaRequest(
            image_ref="i", question=QUESTION, variant="knowledge_facts", knowledge=facts
        )
        assert build_qa_prompt(request) == (GOLDENS / "qa_knowledge_facts.txt").read_text(
            "utf-8"
        )

    def test_instruction_toggle(self, corpus):
        facts = corpus.kb.entity("biz_dominos").facts
        request = QaRequest(
            image_ref="i", question=QUESTION, variant="knowledge_facts", knowledge=facts
        )
        without = build_qa_prompt(request, include_support_instruction=False)
        assert SUPPORT_INSTRUCTION not in without
        assert SUPPORT_INSTRUCTION in build_qa_prompt(request)

    def test_instruction_only_for_knowledge_variant(self):
        request = QaRequest(image_ref="i", question=QUESTION, variant="no_knowledge")
        assert SUPPORT_INSTRUCTION not in build_qa_prompt(request)

    @given(st.sampled_from(PROMPT_VARIANTS))
    def test_variant_isolation(self, variant):
        request = QaRequest(
            image_ref="i",
            question="q?",
            variant=variant,
            knowledge=(_fact("A fact."),),
            entity_name="Name",
            ocr_text="ocr",
        )
        prompt = build_qa_prompt(request)
        assert ("contains the text" in prompt) == (variant == "ocr_only")
        assert ("refers to" in prompt) == (variant == "entity_name_only")
        assert ("A fact." in prompt) == (variant == "knowledge_facts")


class TestParseAnswer:
    def test_standard_split(self):
        out = parse_answer("Ann Arbor Supporting fact: Its headquarters are in Ann Arbor.")
        assert out.answer == "Ann Arbor"
        assert out.supporting_fact == "Its headquarters are in Ann Arbor."

    def test_case_and_whitespace_insensitive_marker(self):
        out = parse_answer("yes SUPPORTING   FACT: It serves pizza.")
        assert out.answer == "yes"
        assert out.supporting_fact == "It serves pizza."

    def test_no_marker(self):
        out = parse_answer("Ann Arbor")
        assert out.answer == "Ann Arbor"
        assert out.supporting_fact is None

    def test_marker_at_start_keeps_answer_whole(self):
        raw = "Supporting fact: Its headquarters are in Ann Arbor."
        out = parse_answer(raw)
        assert out.answer == raw
        assert out.supporting_fact is None

    def test_first_marker_wins(self):
        out = parse_answer("a Supporting fact: b Supporting fact: c")
        assert out.answer == "a"
        assert out.supporting_fact == "b Supporting fact: c"

    def test_empty_raises(self):
        with pytest.raises(EmptyOutputError):
            parse_answer("   ")

    @given(
        st.text(
            alphabet=st.characters(blacklist_categories=("Cs", "Cc")), min_size=1, max_size=30
        ).filter(lambda s: s.strip() and "supporting" not in s.lower()),
        st.text(
            alphabet=st.characters(blacklist_categories=("Cs", "Cc")), min_size=1, max_size=30
        ).filter(lambda s: s.strip()),
    )
    def test_round_trip(self, ans, fact):
        out = parse_answer(f"{ans} Supporting fact: {fact}")
        assert out.answer == ans.strip()
        assert out.supporting_fact == fact.strip()


class TestAnswerPipeline:
    def test_knowledge_variant_round_trip(self, corpus):
        backend = MockLmm(MockPolicy(mode="echo_first_candidate"))
        link_result = link(
            "img_dominos", corpus.fixtures["img_dominos"], corpus.index, 5, backend
        )
        script = {
            QUESTION: "Ann Arbor Supporting fact: Its headquarters are in Ann Arbor, Michigan."
        }
        qa_backend = MockLmm(MockPolicy(mode="gold_answer", script=script))
        out = answer(
            "img_dominos",
            QUESTION,
            link_result,
            corpus.kb,
            "knowledge_facts",
            qa_backend,
            ocr_text="Domino's Pizza",
        )
        assert out.answer == "Ann Arbor"
        assert out.supporting_fact == "Its headquarters are in Ann Arbor, Michigan."

    def test_entity_override_substitutes_linked_entity(self, corpus):
        backend = MockLmm(MockPolicy(mode="echo_first_candidate"))
        link_result = link(
            "img_dominos", corpus.fixtures["img_dominos"], corpus.index, 5, backend
        )
        captured = {}

        class Spy:
            backend_tag = "spy"

            def generate(self, request):
                captured["prompt"] = request.prompt_text
                from textkvqa.lmm import GenerationResult

                return GenerationResult("ok", 0.0, "spy")

        answer(
            "img_dominos",
            QUESTION,
            link_result,
            corpus.kb,
            "knowledge_facts",
            Spy(),
            entity_override="biz_pizzahut",
        )
        assert "Pizza Hut is a restaurant" in captured["prompt"]
        assert "Domino's" not in captured["prompt"]

    def test_no_knowledge_ignores_link(self, corpus):
        backend = MockLmm(MockPolicy(mode="echo_first_candidate"))
        link_result = link(
            "img_dominos", corpus.fixtures["img_dominos"], corpus.index, 5, backend
        )
        captured = {}

        class Spy:
            backend_tag = "spy"

            def generate(self, request):
                captured["prompt"] = request.prompt_text
                from textkvqa.lmm import GenerationResult

                return GenerationResult("ok", 0.0, "spy")

        answer("img_dominos", QUESTION, link_result, corpus.kb, "no_knowledge", Spy())
        assert "Domino" not in captured["prompt"]
