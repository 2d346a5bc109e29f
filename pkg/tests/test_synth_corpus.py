import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from joblib import parallel_backend
from scipy.spatial.distance import pdist

from data.corpus_store import CorpusStore, read_corpus, write_corpus
from data.synth_corpus import (IDENTITY_PRESET, MIN_PRESET_DISTANCE, SCANNER_PRESETS, Corpus, CorpusConfig,
                               ScannerStylePreset, apply_scanner_style, generate_corpus, generate_slide,
                               preset_distance)
from utils.error_handler import CorpusFormatError, PlacementFailure


class TestPresets:
    def test_five_distinct_presets(self):
        assert len(SCANNER_PRESETS) == 5
        for a, b in itertools.combinations(SCANNER_PRESETS, 2):
            assert preset_distance(a, b) >= MIN_PRESET_DISTANCE

    def test_rejects_out_of_range_parameters(self):
        with pytest.raises(ValueError):
            ScannerStylePreset(gain=(2.0, 1.0, 1.0), bias=(0.0, 0.0, 0.0), gamma=1.0, saturation=1.0)
        with pytest.raises(ValueError):
            ScannerStylePreset(gain=(1.0, 1.0, 1.0), bias=(0.0, 0.0, 0.0), gamma=0.2, saturation=1.0)

    def test_identity_preset_keeps_image(self):
        image = np.random.default_rng(0).integers(0, 256, (32, 32, 3)).astype(np.float64)
        np.testing.assert_allclose(apply_scanner_style(image, IDENTITY_PRESET), image, atol=1 / 255)

    def test_red_gain_on_gray(self):
        preset = ScannerStylePreset(gain=(1.2, 1.0, 1.0), bias=(0.0, 0.0, 0.0), gamma=1.0, saturation=1.0)
        out = apply_scanner_style(np.full((4, 4, 3), 128.0), preset)
        assert out[0, 0, 0] > 150
        np.testing.assert_allclose(out[..., 1:], 128.0, atol=1.0)

    @settings(max_examples=30)
    @given(arrays(np.uint8, (6, 6, 3)), st.sampled_from(SCANNER_PRESETS))
    def test_output_stays_in_range(self, image, preset):
        out = apply_scanner_style(image, preset)
        assert out.min() >= 0.0 and out.max() <= 255.0


class TestGenerateSlide:
    def test_no_mitoses(self):
        slide = generate_slide(3, 0, size=256, n_mitoses=0, n_distractors=10)
        assert slide.mitoses == []
        assert slide.image.shape == (256, 256, 3) and slide.image.dtype == np.uint8

    def test_same_seed_same_pixels(self):
        a = generate_slide(7, 2, size=256, n_mitoses=3, n_distractors=20)
        b = generate_slide(7, 2, size=256, n_mitoses=3, n_distractors=20)
        assert a.image.tobytes() == b.image.tobytes()
        assert [(m.x, m.y) for m in a.mitoses] == [(m.x, m.y) for m in b.mitoses]

    def test_scanner_changes_style(self):
        a = generate_slide(7, 0, size=256, n_mitoses=3, n_distractors=20)
        b = generate_slide(7, 4, size=256, n_mitoses=3, n_distractors=20)
        assert not np.array_equal(a.image, b.image)

    def test_spacing_and_margins(self):
        slide = generate_slide(1, 1, size=1024, n_mitoses=10, n_distractors=60)
        centers = slide.mitosis_centers()
        assert len(centers) == 10
        assert pdist(centers).min() >= 50
        assert centers.min() >= 25 and centers.max() <= 1024 - 25

    def test_overcrowded_slide_fails(self):
        with pytest.raises(PlacementFailure):
            generate_slide(0, 0, size=128, n_mitoses=30, n_distractors=0)


class TestCorpus:
    def test_ids_and_summary(self):
        corpus = generate_corpus(CorpusConfig(slides_per_scanner=2, slide_size=128, mitoses_per_slide=1,
                                              mitoses_jitter=0, distractors_per_slide=5))
        assert len(corpus.slides) == 10
        assert corpus.slides[0].slide_id == "scanner0_000"
        assert corpus.slides[-1].slide_id == "scanner4_001"
        summary = corpus.summary()
        assert all(summary[d] == {'slides': 2, 'mitoses': 2} for d in range(5))
        assert [s.slide_id for s in corpus.filter([4]).slides] == ["scanner4_000", "scanner4_001"]

    def test_parallel_matches_sequential(self):
        cfg = CorpusConfig(corpus_seed=3, slides_per_scanner=1, slide_size=128, distractors_per_slide=5,
                           mitoses_per_slide=1, mitoses_jitter=0)
        sequential = generate_corpus(cfg)
        with parallel_backend('threading'):
            parallel = generate_corpus(cfg.model_copy(update={'n_jobs': 2}))
        for a, b in zip(sequential.slides, parallel.slides):
            assert a.slide_id == b.slide_id
            assert np.array_equal(a.image, b.image)

    def test_patch_must_fit_slide(self):
        with pytest.raises(ValueError):
            CorpusConfig(slide_size=128, patch_size=256)


class TestCorpusStore:
    def test_empty_corpus(self, tmp_path):
        write_corpus(Corpus(slides=[]), tmp_path)
        assert json.loads((tmp_path / "annotations.json").read_text()) == {}
        assert (tmp_path / "meta.json").exists()
        assert read_corpus(tmp_path).slides == []

    def test_single_slide_round_trip(self, tmp_path):
        slide = generate_slide(4, 3, size=128, n_mitoses=1, n_distractors=5, slide_id="scanner3_000")
        write_corpus(Corpus(slides=[slide]), tmp_path)
        (back,) = read_corpus(tmp_path).slides
        assert back.slide_id == slide.slide_id and back.scanner == slide.scanner
        assert back.mitoses == slide.mitoses
        np.testing.assert_array_equal(back.image, slide.image)

    def test_unknown_scanner_id(self, tmp_path):
        slide = generate_slide(4, 0, size=128, n_mitoses=1, n_distractors=5, slide_id="s")
        store = CorpusStore(tmp_path)
        store.write(Corpus(slides=[slide]))
        annotations = json.loads(store.annotations_path.read_text())
        annotations["s"]["scanner"] = 7
        store.annotations_path.write_text(json.dumps(annotations))
        with pytest.raises(CorpusFormatError) as info:
            store.read()
        assert info.value.path == str(store.annotations_path)

    def test_missing_image(self, tmp_path):
        slide = generate_slide(4, 0, size=128, n_mitoses=1, n_distractors=5, slide_id="s")
        store = CorpusStore(tmp_path)
        store.write(Corpus(slides=[slide]))
        store.image_path("s").unlink()
        with pytest.raises(CorpusFormatError) as info:
            store.read()
        assert info.value.path == str(store.image_path("s"))

    def test_missing_meta(self, tmp_path):
        with pytest.raises(CorpusFormatError):
            read_corpus(tmp_path)
