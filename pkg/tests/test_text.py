"""Report parsing, sentence segmentation, tokenization and token masking."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volrep.rng import Rng
from volrep.synth import GenConfig, corpus_vocab, generate_sample
from volrep.text import (
    CLS_ID, MASK_ID, SEP_ID, SPECIAL_TOKENS, UNK_ID, ReportFormatError, Vocab,
    VocabError, build_report_bundle, detokenize, mask_tokens, split_report,
    split_sentences, tokenize,
)


@pytest.fixture(scope="module")
def vocab():
    return corpus_vocab()


class TestSplitReport:
    def test_both_sections(self):
        assert split_report("FINDINGS: A. IMPRESSION: B.") == ("A.", "B.")

    def test_missing_impression(self):
        assert split_report("FINDINGS: A.") == ("A.", "")

    def test_case_insensitive_headers(self):
        assert split_report("Findings: x. impression: y.") == ("x.", "y.")

    def test_missing_findings_rejected(self):
        with pytest.raises(ReportFormatError):
            split_report("IMPRESSION: only a summary.")

    def test_generator_output_splits_losslessly(self):
        for seed in range(30):
            sample = generate_sample(seed)
            findings, impression = split_report(sample.report_text)
            assert f"FINDINGS: {findings} IMPRESSION: {impression}" == sample.report_text


class TestSplitSentences:
    def test_two_sentences(self):
        got = split_sentences("Nodule in lobe. No effusion.")
        assert got == ["Nodule in lobe.", "No effusion."]

    def test_decimal_number_does_not_split(self):
        got = split_sentences("Nodule measuring 1.5 cm in lobe.")
        assert got == ["Nodule measuring 1.5 cm in lobe."]

    def test_terminators_kept_and_empties_dropped(self):
        got = split_sentences("One!  Two?   ")
        assert got == ["One!", "Two?"]

    def test_unterminated_tail_kept(self):
        assert split_sentences("No period here") == ["No period here"]

    def test_idempotent_on_single_sentences(self):
        for s in ("A mass is seen.", "Really?", "No change!"):
            assert split_sentences(s) == [s]

    def test_generated_findings_match_planted_clause_count(self):
        for seed in range(500):
            sample = generate_sample(seed)
            findings, _ = split_report(sample.report_text)
            assert len(split_sentences(findings)) == len(sample.sentence_truth)


class TestTokenize:
    def test_empty_with_specials(self, vocab):
        assert tokenize("", vocab, with_specials=True) == [CLS_ID, SEP_ID]

    def test_word_and_punctuation(self, vocab):
        ids = tokenize("nodule.", vocab)
        assert ids == [vocab.id_of("nodule"), vocab.id_of(".")]
        assert UNK_ID not in ids

    def test_unknown_word_maps_to_unk(self, vocab):
        assert tokenize("xylophone", vocab) == [UNK_ID]

    def test_detokenize_roundtrip_on_corpus(self, vocab):
        for seed in range(50):
            sample = generate_sample(seed)
            norm = " ".join(sample.report_text.lower().split())
            back = detokenize(tokenize(sample.report_text, vocab, True), vocab)
            assert back == norm

    @settings(max_examples=60, deadline=None)
    @given(st.text(max_size=80))
    def test_ids_always_in_range(self, vocab, text):
        for i in tokenize(text, vocab, with_specials=True):
            assert 0 <= i < len(vocab)


class TestMaskTokens:
    def _tokens(self, n_body):
        return [CLS_ID] + list(range(5, 5 + n_body)) + [SEP_ID]

    def test_gamma_zero_is_identity(self):
        tokens = self._tokens(6)
        input_ids, plan, target = mask_tokens(tokens, 0.0, Rng(0))
        assert input_ids == tokens and plan.n_masked == 0 and target == tokens

    def test_exact_count_and_reproducible(self):
        tokens = self._tokens(12)
        a_ids, a_plan, _ = mask_tokens(tokens, 0.75, Rng(9, 1))
        b_ids, b_plan, _ = mask_tokens(tokens, 0.75, Rng(9, 1))
        assert a_plan.n_masked == 9
        assert a_ids == b_ids
        np.testing.assert_array_equal(a_plan.masked_idx, b_plan.masked_idx)

    def test_masked_positions_carry_mask_token(self):
        tokens = self._tokens(8)
        input_ids, plan, target = mask_tokens(tokens, 0.5, Rng(3))
        for pos in plan.masked_idx:
            assert input_ids[pos] == MASK_ID
            assert target[pos] == tokens[pos]
        for pos in plan.unmasked_idx:
            assert input_ids[pos] == tokens[pos]

    @settings(max_examples=60, deadline=None)
    @given(n_body=st.integers(0, 30), gamma=st.floats(0.0, 1.0), seed=st.integers(0, 2**16))
    def test_specials_never_masked(self, n_body, gamma, seed):
        tokens = self._tokens(n_body)
        input_ids, plan, _ = mask_tokens(tokens, gamma, Rng(seed))
        assert input_ids[0] == CLS_ID and input_ids[-1] == SEP_ID
        assert plan.n_masked == int(np.floor(gamma * n_body + 0.5))

    def test_bert_style_variant(self, vocab):
        tokens = [CLS_ID] + [vocab.id_of("nodule")] * 40 + [SEP_ID]
        input_ids, plan, _ = mask_tokens(tokens, 1.0, Rng(5), vocab, bert_style=True)
        kinds = {"mask": 0, "same": 0, "other": 0}
        for pos in plan.masked_idx:
            if input_ids[pos] == MASK_ID:
                kinds["mask"] += 1
            elif input_ids[pos] == tokens[pos]:
                kinds["same"] += 1
            else:
                kinds["other"] += 1
        assert kinds["mask"] > kinds["same"] + kinds["other"]
        assert kinds["same"] > 0 or kinds["other"] > 0


class TestVocab:
    def test_file_roundtrip(self, tmp_path, vocab):
        path = tmp_path / "vocab.txt"
        vocab.to_file(path)
        back = Vocab.from_file(path)
        assert back.tokens == vocab.tokens
        assert back.id_of("nodule") == vocab.id_of("nodule")

    def test_first_five_lines_are_specials(self, tmp_path, vocab):
        path = tmp_path / "vocab.txt"
        vocab.to_file(path)
        lines = path.read_text().splitlines()
        assert tuple(lines[:5]) == SPECIAL_TOKENS

    def test_bad_header_rejected(self):
        with pytest.raises(VocabError):
            Vocab(["[PAD]", "[UNK]", "nodule"])

    def test_duplicates_rejected(self):
        with pytest.raises(VocabError):
            Vocab(list(SPECIAL_TOKENS) + ["a", "a"])


class TestReportBundle:
    def test_bundle_fields(self, vocab):
        rng = Rng(1)
        sample = generate_sample(3)
        bundle = build_report_bundle(sample.report_text, vocab, 0.75, rng)
        assert bundle.tokens[0] == CLS_ID and bundle.tokens[-1] == SEP_ID
        assert len(bundle.sentences) == len(sample.sentence_truth)
        for ids in bundle.sentences:
            assert ids[0] == CLS_ID and ids[-1] == SEP_ID
        assert len(bundle.input_ids) == len(bundle.tokens)
        assert bundle.token_mask.n_total == len(bundle.tokens)
        # sentences come from findings only
        joined = " ".join(
            detokenize(ids, vocab) for ids in bundle.sentences
        )
        assert joined == " ".join(bundle.findings_text.lower().split())

    def test_no_unk_on_corpus(self, vocab):
        for seed in range(40):
            bundle = build_report_bundle(
                generate_sample(seed).report_text, vocab, 0.5, Rng(seed)
            )
            assert UNK_ID not in bundle.tokens
