"""Synthetic generator: determinism, ground-truth consistency, lesion
statistics, and the on-disk corpus layout."""

import os

import numpy as np
import pytest

from volrep.rng import Rng
from volrep.synth import (
    GenConfig, GenerationError, LesionType, corpus_vocab, generate_corpus,
    generate_sample, load_corpus,
)
from volrep.text import UNK_ID, split_report, split_sentences, tokenize
from volrep.volume import patchify


class TestGenerateSample:
    def test_same_seed_byte_identical(self):
        a = generate_sample(123)
        b = generate_sample(123)
        assert a.volume.voxels.tobytes() == b.volume.voxels.tobytes()
        assert a.report_text == b.report_text
        assert all(np.array_equal(x, y) for x, y in zip(a.sentence_truth, b.sentence_truth))
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_disjoint_seeds_differ(self):
        a = generate_sample(0)
        b = generate_sample(10_000)
        assert a.volume.voxels.tobytes() != b.volume.voxels.tobytes()

    def test_two_lesions_give_two_sentences_and_truth_sets(self):
        cfg = GenConfig(lesion_min=2, lesion_max=2)
        sample = generate_sample(5, cfg)
        findings, _ = split_report(sample.report_text)
        assert len(split_sentences(findings)) == 2
        assert len(sample.sentence_truth) == 2
        assert int(sample.labels.sum()) == 2

    def test_sentence_count_equals_lesion_count(self):
        for seed in range(40):
            sample = generate_sample(seed)
            assert len(sample.sentence_truth) == int(sample.labels.sum())

    def test_truth_patches_outshine_background(self):
        """Each truth patch contains a voxel above the background p99."""
        for seed in range(30):
            sample = generate_sample(seed)
            vox = sample.volume.voxels
            lesion_voxels = np.unique(np.concatenate(sample.support_masks))
            background = np.delete(vox, lesion_voxels)
            p99 = np.percentile(background, 99)
            patches = patchify(sample.volume, (8, 8, 4)).patches
            for truth in sample.sentence_truth:
                for p in truth:
                    assert patches[p].max() > p99

    def test_truth_patches_contain_lesion_voxels(self):
        sample = generate_sample(7)
        for mask, truth in zip(sample.lesion_masks, sample.sentence_truth):
            assert mask.size > 0
            assert truth.size > 0

    def test_lesion_sparsity_bound(self):
        n_voxels = 32 * 32 * 16
        for seed in range(40):
            sample = generate_sample(seed)
            total = sum(m.size for m in sample.lesion_masks)
            assert total <= 0.1 * n_voxels
            for m in sample.lesion_masks:
                assert m.size <= 0.1 * n_voxels

    def test_truth_rederivable_from_masks(self):
        """Stored truth equals patch indices recomputed voxel by voxel."""
        h, w, d = 32, 32, 16
        ph, pw, pd = 8, 8, 4
        gh, gw = h // ph, w // pw
        for seed in range(10):
            sample = generate_sample(seed)
            for mask, truth in zip(sample.lesion_masks, sample.sentence_truth):
                rederived = set()
                for flat in mask:
                    z, rem = divmod(int(flat), h * w)
                    y, x = divmod(rem, w)
                    rederived.add((z // pd) * gh * gw + (y // ph) * gw + (x // pw))
                assert sorted(rederived) == truth.tolist()

    def test_octant_words_match_truth_location(self):
        """The sentence's octant words point at the truth patches' side."""
        for seed in range(25):
            sample = generate_sample(seed)
            findings, _ = split_report(sample.report_text)
            sentences = split_sentences(findings)
            for sent, truth, mask in zip(sentences, sample.sentence_truth,
                                         sample.lesion_masks):
                zs, rem = np.divmod(mask, 32 * 32)
                ys, xs = np.divmod(rem, 32)
                if "left" in sent:
                    assert xs.mean() < 20
                if "right" in sent:
                    assert xs.mean() > 12
                if "upper" in sent:
                    assert zs.mean() < 12
                if "lower" in sent:
                    assert zs.mean() > 4

    def test_reports_covered_by_vocab(self):
        vocab = corpus_vocab()
        for seed in range(50):
            ids = tokenize(generate_sample(seed).report_text, vocab)
            assert UNK_ID not in ids

    def test_placement_failure_raises(self):
        crowded = GenConfig(
            dims=(8, 8, 8), patch_dims=(4, 4, 4),
            lesion_min=4, lesion_max=4, max_retries=3,
            types=tuple(
                LesionType(f"t{i}", (3.5, 4.0), 1.0, (500.0, 600.0))
                for i in range(4)
            ),
        )
        with pytest.raises(GenerationError):
            for seed in range(20):
                generate_sample(seed, crowded)


class TestLabelPrevalence:
    def test_prevalence_matches_target_over_1000(self):
        cfg = GenConfig()
        counts = np.zeros(4)
        n = 1000
        for seed in range(n):
            counts += generate_sample(seed, cfg).labels
        target = cfg.expected_prevalence
        for freq in counts / n:
            assert abs(freq - target) <= 0.1 * target


class TestCorpusOnDisk:
    def test_single_sample_file_layout(self, tmp_path):
        out = tmp_path / "corpus"
        manifest = generate_corpus(3, 1, GenConfig(), out)
        files = sorted(os.listdir(out))
        assert files == [
            "labels.csv", "manifest.csv", "sample_0000.report.txt",
            "sample_0000.svol", "sample_0000.truth.txt",
        ]
        assert manifest == str(out / "manifest.csv")

    def test_truth_file_format(self, tmp_path):
        generate_corpus(3, 1, GenConfig(), tmp_path)
        lines = (tmp_path / "sample_0000.truth.txt").read_text().splitlines()
        for i, line in enumerate(lines):
            head, _, tail = line.partition(":")
            assert int(head) == i
            assert all(p.strip().isdigit() for p in tail.split(","))

    def test_rerun_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_corpus(7, 3, GenConfig(), a)
        generate_corpus(7, 3, GenConfig(), b)
        for name in os.listdir(a):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_roundtrip_through_loader(self, tmp_path):
        generate_corpus(11, 4, GenConfig(), tmp_path)
        samples = load_corpus(tmp_path)
        assert [s.sample_id for s in samples] == [0, 1, 2, 3]
        for i, loaded in enumerate(samples):
            direct = generate_sample(11 + i)
            np.testing.assert_allclose(loaded.volume.voxels, direct.volume.voxels,
                                       rtol=1e-6)
            assert loaded.report_text == direct.report_text
            np.testing.assert_array_equal(loaded.labels, direct.labels)
            assert len(loaded.truth) == len(direct.sentence_truth)
            for got, want in zip(loaded.truth, direct.sentence_truth):
                np.testing.assert_array_equal(got, want)

    def test_manifest_lists_labels(self, tmp_path):
        generate_corpus(0, 2, GenConfig(), tmp_path)
        header = (tmp_path / "manifest.csv").read_text().splitlines()[0]
        assert header == ("sample_id,volume_path,report_path,truth_path,"
                          "label_nodule,label_mass,label_band,label_haze")

    def test_empty_corpus_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            generate_corpus(0, 0, GenConfig(), tmp_path)
