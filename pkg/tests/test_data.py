"""Synthetic corpus generation, manifests, and balanced sampling."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geolid.data import (SAMPLE_RATE, Batch, CorpusCounts, DataError,
                         DialectSpec, ManifestEntry, SyntheticLanguageSpec,
                         balanced_sampler, batch_iterator, build_geo_table,
                         default_specs, derive_seed, gen_corpus, group_by_lang,
                         load_manifest, load_signal, manifest_langs,
                         sample_batch, synth_utterance)
from geolid.geovec import GeoCoordinate, fibonacci_lattice


def clean_spec(code="aa", formants=(300.0, 900.0, 2200.0), rate=3.0,
               lat=10.0, lon=20.0, dialects=(DialectSpec("default"),),
               noise=0.0, jitter=0.0):
    return SyntheticLanguageSpec(code=code, formants=formants,
                                 modulation_rate=rate, noise_floor=noise,
                                 coordinate=GeoCoordinate(lat, lon),
                                 dialects=dialects, formant_jitter=jitter)


class TestDeriveSeed:
    def test_deterministic_and_order_sensitive(self):
        assert derive_seed("a", 1) == derive_seed("a", 1)
        assert derive_seed("a", 1) != derive_seed(1, "a")

    @given(st.lists(st.integers(0, 10 ** 9), min_size=1, max_size=4))
    @settings(max_examples=100, deadline=None)
    def test_fits_in_63_bits(self, parts):
        assert 0 <= derive_seed(*parts) < 2 ** 63


class TestSynthUtterance:
    def test_deterministic_for_same_seed(self):
        spec = clean_spec(noise=0.1, jitter=0.02)
        a = synth_utterance(spec, "default", 1.0, 42)
        b = synth_utterance(spec, "default", 1.0, 42)
        np.testing.assert_array_equal(a, b)
        c = synth_utterance(spec, "default", 1.0, 43)
        assert np.any(a != c)

    def test_length_dtype_and_peak(self):
        sig = synth_utterance(clean_spec(noise=0.1), "default", 1.5, 0)
        assert sig.shape == (int(1.5 * SAMPLE_RATE),)
        assert sig.dtype == np.float32
        assert np.max(np.abs(sig)) == pytest.approx(0.95, abs=1e-3)

    def test_spectrum_peaks_at_configured_formants(self):
        # noise-free, jitter-free spectrum must concentrate at the formants
        spec = clean_spec(formants=(400.0, 1200.0, 2000.0))
        sig = synth_utterance(spec, "default", 2.0, 5).astype(np.float64)
        power = np.abs(np.fft.rfft(sig)) ** 2
        freqs = np.fft.rfftfreq(len(sig), d=1.0 / SAMPLE_RATE)
        near = np.zeros(len(freqs), dtype=bool)
        for f in spec.formants:
            # amplitude modulation spreads each carrier into f +/- rate
            near |= np.abs(freqs - f) < 10.0
        assert power[near].sum() > 0.99 * power.sum()

    def test_dominant_frequency_tracks_dialect_shift(self):
        dialects = (DialectSpec("default"),
                    DialectSpec("d1", formant_shift=(1.1, 1.1, 1.1)))
        spec = clean_spec(formants=(500.0,), dialects=dialects)
        freqs = {}
        for d in ("default", "d1"):
            sig = synth_utterance(spec, d, 2.0, 9).astype(np.float64)
            mag = np.abs(np.fft.rfft(sig))
            freqs[d] = np.fft.rfftfreq(len(sig), d=1.0 / SAMPLE_RATE)[mag.argmax()]
        assert freqs["default"] == pytest.approx(500.0, abs=5.0)
        assert freqs["d1"] == pytest.approx(550.0, abs=5.0)

    def test_duration_bounds_enforced(self):
        for bad in (0.4, 10.5):
            with pytest.raises(DataError):
                synth_utterance(clean_spec(), "default", bad, 0)

    def test_unknown_dialect_rejected(self):
        with pytest.raises(KeyError):
            synth_utterance(clean_spec(), "nope", 1.0, 0)


class TestSpecValidation:
    def test_formant_must_be_below_nyquist(self):
        with pytest.raises(DataError):
            clean_spec(formants=(300.0, 4000.0))

    def test_at_least_one_formant_and_dialect(self):
        with pytest.raises(DataError):
            clean_spec(formants=())
        with pytest.raises(DataError):
            clean_spec(dialects=())

    def test_manifest_entry_split_validated(self):
        with pytest.raises(DataError):
            ManifestEntry("x", "aa", "default", "test", 1.0, "p")


class TestDefaultSpecs:
    def test_counts_and_dialect_structure(self):
        specs = default_specs(num_languages=12, num_dialect_languages=4,
                              extra_dialects=2)
        assert len(specs) == 12
        multi = [s for s in specs if len(s.dialects) > 1]
        assert len(multi) == 4
        for s in multi:
            assert len(s.dialects) == 3  # default + 2 extras
        assert len({s.code for s in specs}) == 12

    def test_coordinates_distinct(self):
        specs = default_specs()
        coords = {(s.coordinate.latitude_deg, s.coordinate.longitude_deg)
                  for s in specs}
        assert len(coords) == len(specs)

    def test_languages_acoustically_distinct(self):
        specs = default_specs()
        assert len({s.formants for s in specs}) == len(specs)
        assert len({s.modulation_rate for s in specs}) == len(specs)
        # neighbouring first formants keep a constant relative gap
        f1s = sorted(s.formants[0] for s in specs)
        ratios = [b / a for a, b in zip(f1s, f1s[1:])]
        assert min(ratios) > 1.1


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    specs = default_specs(num_languages=3, num_dialect_languages=1,
                          extra_dialects=2)
    counts = CorpusCounts(train_per_lang=4, dev_per_lang=2,
                          dialect_dev_per_dialect=2)
    manifest = gen_corpus(specs, counts, seed=7, out_dir=root)
    return root, specs, counts, manifest


class TestGenCorpus:
    def test_split_counts(self, corpus):
        root, specs, counts, manifest = corpus
        entries = load_manifest(manifest)
        per_split = {}
        for e in entries:
            per_split[e.split] = per_split.get(e.split, 0) + 1
        assert per_split["train"] == 3 * counts.train_per_lang
        assert per_split["dev"] == 3 * counts.dev_per_lang
        assert per_split["dialect-dev"] == 2 * counts.dialect_dev_per_dialect

    def test_signals_round_trip(self, corpus):
        root, _, _, manifest = corpus
        entries = load_manifest(manifest)
        for e in entries[:5]:
            sig = load_signal(root, e)
            assert sig.shape == (int(e.seconds * SAMPLE_RATE),)
            assert sig.dtype == np.float32

    def test_regeneration_bitwise_identical(self, corpus, tmp_path):
        root, specs, counts, manifest = corpus
        manifest2 = gen_corpus(specs, counts, seed=7, out_dir=tmp_path)
        a = load_manifest(manifest)
        b = load_manifest(manifest2)
        assert a == b
        for e in a[:10]:
            assert load_signal(root, e).tobytes() == \
                load_signal(tmp_path, e).tobytes()

    def test_dialect_dev_only_contains_non_default_dialects(self, corpus):
        _, _, _, manifest = corpus
        for e in load_manifest(manifest):
            if e.split == "dialect-dev":
                assert e.dialect != "default"
            else:
                assert e.dialect == "default"

    def test_manifest_langs_sorted(self, corpus):
        _, _, _, manifest = corpus
        langs = manifest_langs(load_manifest(manifest))
        assert langs == sorted(langs) == ["lang00", "lang01", "lang02"]

    def test_coordinate_collision_rejected(self, tmp_path):
        specs = [clean_spec("aa"), clean_spec("bb")]
        with pytest.raises(DataError):
            gen_corpus(specs, CorpusCounts(1, 1, 1), 0, tmp_path)

    def test_malformed_manifest_line_reports_position(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text('{"id": "x"}\n')
        with pytest.raises(DataError, match=":1"):
            load_manifest(path)


class TestBalancedSampler:
    def test_four_to_one_with_half_beta_gives_two_thirds(self):
        plan = balanced_sampler({"aa": 4, "bb": 1}, beta=0.5)
        # 4**0.5 : 1**0.5 = 2 : 1
        assert plan.langs == ("aa", "bb")
        assert plan.probs[0] == pytest.approx(2.0 / 3.0, abs=1e-15)
        assert plan.probs[1] == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_beta_zero_is_uniform_beta_one_is_proportional(self):
        counts = {"aa": 8, "bb": 2}
        uniform = balanced_sampler(counts, 0.0).probs
        np.testing.assert_allclose(uniform, [0.5, 0.5], atol=1e-15)
        prop = balanced_sampler(counts, 1.0).probs
        np.testing.assert_allclose(prop, [0.8, 0.2], atol=1e-15)

    def test_empirical_frequency_within_two_percent(self):
        plan = balanced_sampler({"aa": 4, "bb": 1}, beta=0.5)
        rng = np.random.default_rng(0)
        draws = rng.choice(len(plan.langs), size=10000, p=plan.probs)
        freq = np.mean(draws == 0)
        assert abs(freq - 2.0 / 3.0) < 0.02

    def test_validation(self):
        with pytest.raises(DataError):
            balanced_sampler({}, 0.5)
        with pytest.raises(DataError):
            balanced_sampler({"aa": 1}, 1.5)
        with pytest.raises(DataError):
            balanced_sampler({"aa": 0}, 0.5)


@pytest.fixture(scope="module")
def batch_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("batches")
    specs = default_specs(num_languages=3, num_dialect_languages=0)
    counts = CorpusCounts(train_per_lang=5, dev_per_lang=2,
                          dialect_dev_per_dialect=0)
    manifest = gen_corpus(specs, counts, seed=3, out_dir=root)
    entries = load_manifest(manifest)
    table = build_geo_table(specs, fibonacci_lattice(8))
    return root, entries, table


class TestBatches:
    def test_batch_meets_seconds_budget(self, batch_setup):
        root, entries, table = batch_setup
        by_lang = group_by_lang(entries)
        plan = balanced_sampler({l: len(v) for l, v in by_lang.items()}, 0.5)
        rng = np.random.default_rng(1)
        batch = sample_batch(by_lang, plan, 4.0, rng, table, root,
                             sorted(by_lang))
        assert isinstance(batch, Batch)
        assert batch.wave.shape[0] * 1.0 >= 4.0
        assert batch.geo.shape == (batch.wave.shape[0], 8)
        assert batch.labels.max() < 3

    def test_iterator_deterministic_per_seed(self, batch_setup):
        root, entries, table = batch_setup
        by_lang = group_by_lang(entries)
        plan = balanced_sampler({l: len(v) for l, v in by_lang.items()}, 0.5)
        first = [next(batch_iterator(entries, plan, 3.0, 11, table, root))
                 for _ in range(2)]
        assert first[0].ids == first[1].ids
        np.testing.assert_array_equal(first[0].wave, first[1].wave)
        other = next(batch_iterator(entries, plan, 3.0, 12, table, root))
        assert other.ids != first[0].ids

    def test_labels_map_to_sorted_language_order(self, batch_setup):
        root, entries, table = batch_setup
        by_lang = group_by_lang(entries)
        plan = balanced_sampler({l: len(v) for l, v in by_lang.items()}, 0.5)
        batch = next(batch_iterator(entries, plan, 6.0, 2, table, root))
        labels = sorted(by_lang)
        for lab, lang in zip(batch.labels, batch.langs):
            assert labels[lab] == lang

    def test_geo_rows_match_language_table(self, batch_setup):
        root, entries, table = batch_setup
        by_lang = group_by_lang(entries)
        plan = balanced_sampler({l: len(v) for l, v in by_lang.items()}, 0.5)
        batch = next(batch_iterator(entries, plan, 3.0, 4, table, root))
        for row, lang in zip(batch.geo, batch.langs):
            np.testing.assert_allclose(row, table.vector(lang).values,
                                       atol=1e-6)
