from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from maskprobe.assembly import (
    NoiseExcerpt,
    Utterance,
    assemble_stream,
    extract_noise,
    labels_from_manifest,
    load_wav,
    read_speech_pool,
    stratified_order,
    top_accents,
)
from maskprobe.core import AudioStream, Segment, StftConfig, StreamManifest, validate_manifest

CFG = StftConfig()


def _stream(x, role):
    return AudioStream(np.asarray(x, dtype=np.float64), 16000, role)


def test_extract_noise_identity_mixture(rng):
    s = rng.standard_normal(1000)
    assert np.all(extract_noise(_stream(s, "noisy"), _stream(s, "clean")).samples == 0)


def test_extract_noise_recovers_additive_excerpt(rng):
    s = rng.standard_normal(1000)
    white = rng.standard_normal(1000)
    x = s + 0.5 * white
    n = extract_noise(_stream(x, "noisy"), _stream(s, "clean")).samples
    np.testing.assert_array_equal(n, x - s)
    np.testing.assert_allclose(n, 0.5 * white, rtol=0, atol=1e-15)
    np.testing.assert_allclose(x - n, s, rtol=0, atol=1e-15)


def test_extract_noise_checks_lengths_and_roles():
    with pytest.raises(ValueError):
        extract_noise(_stream(np.zeros(5), "noisy"), _stream(np.zeros(6), "clean"))
    with pytest.raises(ValueError):
        extract_noise(_stream(np.zeros(5), "clean"), _stream(np.zeros(5), "noisy"))


def _utts(sizes):
    out = []
    for k, n in enumerate(sizes):
        out += [Utterance(f"s{k}_{i}", f"spk{k}", "MF"[k % 2], f"acc{k}") for i in range(n)]
    return out


def _counts_per_prefix(order, key):
    c = Counter()
    for e in order:
        c[key(e)] += 1
        yield dict(c)


def test_two_strata_alternate():
    for seed in range(10):
        order = stratified_order(_utts([2, 2]), ["accent"], seed)
        strata = [u.accent for u in order]
        assert strata[0] != strata[1] and strata[2] != strata[3]


def test_stratified_order_is_deterministic():
    pool = _utts([3, 4, 2])
    assert stratified_order(pool, ["accent"], 5) == stratified_order(pool, ["accent"], 5)
    assert sorted(u.utterance_id for u in stratified_order(pool, ["accent"], 5)) == \
        sorted(u.utterance_id for u in pool)


def test_sizes_4_2_2_prefix_6_is_balanced():
    # exhaustive check over seeds: the first 6 draws take 2 from each stratum
    for seed in range(50):
        order = stratified_order(_utts([4, 2, 2]), ["accent"], seed)
        c = Counter(u.accent for u in order[:6])
        assert sorted(c.values()) == [2, 2, 2]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=5), st.integers(0, 2**31 - 1))
def test_prefix_balance_bound(sizes, seed):
    pool = _utts(sizes)
    order = stratified_order(pool, ["gender", "accent"], seed)
    total = Counter(u.accent for u in pool)
    for c in _counts_per_prefix(order, lambda u: u.accent):
        live = [c.get(a, 0) for a in total if c.get(a, 0) < total[a]]
        if live:
            assert max(live) - min(live) <= 1
            # an exhausted stratum never ran ahead of live ones by more than one
            assert all(v <= max(live) + 1 for v in c.values())


def test_stratified_order_empty_pool():
    with pytest.raises(ValueError):
        stratified_order([], ["accent"], 0)


def _wav_like(rng, n):
    """Random samples on the PCM16 grid, as decoded WAV data would be."""
    return np.round(rng.uniform(-0.5, 0.5, n) * 32768) / 32768


def _loader(table):
    return lambda e: table[getattr(e, "utterance_id", None) or e.excerpt_id]


def test_two_one_second_utterances_frame_spans(rng):
    u = [Utterance("a", "p1", "M", "English"), Utterance("b", "p1", "M", "English")]
    n = [NoiseExcerpt("n", "Office")]
    table = {"a": _wav_like(rng, 16000), "b": _wav_like(rng, 16000), "n": _wav_like(rng, 32000)}
    s, noise, x, m = assemble_stream(u, n, 0, CFG, _loader(table))
    assert [(g.start_frame, g.end_frame) for g in m.segments] == [(0, 62), (62, 125)]
    assert m.n_frames == CFG.frame_count(32000)
    assert np.array_equal(x.samples - noise.samples, s.samples)


def test_single_utterance_matching_noise(rng):
    table = {"a": _wav_like(rng, 5000), "n": _wav_like(rng, 5000)}
    s, n, x, m = assemble_stream([Utterance("a", "p", "F", "Irish")], [NoiseExcerpt("n", "Street")],
                                 0, CFG, _loader(table))
    assert len(m.segments) == 1 and m.segments[0].noise_category == "Street"
    assert np.array_equal(x.samples - n.samples, s.samples)
    np.testing.assert_array_equal(n.samples, table["n"])


def test_short_noise_loops_with_seams(rng):
    table = {"a": _wav_like(rng, 10000), "n1": np.full(1500, 0.125), "n2": np.full(1000, -0.25)}
    s, n, x, m = assemble_stream([Utterance("a", "p", "F", "Irish")],
                                 [NoiseExcerpt("n1", "Office"), NoiseExcerpt("n2", "Street")],
                                 0, CFG, _loader(table))
    assert len(n) == len(s) == 10000
    np.testing.assert_array_equal(n.samples[:1500], 0.125)  # gain preserved
    np.testing.assert_array_equal(n.samples[2500:4000], 0.125)
    assert len(m.noise_seams) == 3
    assert np.array_equal(x.samples - n.samples, s.samples)


def test_segment_noise_label_is_category_at_start(rng):
    table = {"a": np.zeros(3000), "b": np.zeros(3000), "n1": np.zeros(3000), "n2": np.zeros(4000)}
    *_, m = assemble_stream([Utterance("a", "p", "F", "Irish"), Utterance("b", "p", "F", "Irish")],
                            [NoiseExcerpt("n1", "Office"), NoiseExcerpt("n2", "Street")], 0, CFG, _loader(table))
    assert [g.noise_category for g in m.segments] == ["Office", "Street"]


def test_assembly_is_reproducible(rng):
    table = {f"u{i}": _wav_like(rng, 3000 + 100 * i) for i in range(5)}
    table |= {f"n{i}": rng.standard_normal(2000) for i in range(3)}
    utts = [Utterance(f"u{i}", f"p{i % 2}", "MF"[i % 2], "English") for i in range(5)]
    noise = [NoiseExcerpt(f"n{i}", "Office") for i in range(3)]
    runs = [assemble_stream(stratified_order(utts, ["gender"], 9), noise, 9, CFG, _loader(table))
            for _ in range(2)]
    for a, b in zip(runs[0][:3], runs[1][:3]):
        assert a.samples.tobytes() == b.samples.tobytes()
    assert runs[0][3].to_json() == runs[1][3].to_json()
    validate_manifest(runs[0][3])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(600, 4000), min_size=1, max_size=4), st.lists(st.integers(300, 5000), min_size=1, max_size=3),
       st.integers(0, 1000))
def test_mixture_is_exactly_additive(utt_lens, noise_lens, seed):
    rng = np.random.default_rng(seed)
    table = {f"u{i}": _wav_like(rng, n) for i, n in enumerate(utt_lens)}
    table |= {f"n{i}": _wav_like(rng, n) for i, n in enumerate(noise_lens)}
    utts = [Utterance(f"u{i}", "p", "M", "English") for i in range(len(utt_lens))]
    noise = [NoiseExcerpt(f"n{i}", "Office") for i in range(len(noise_lens))]
    s, n, x, m = assemble_stream(utts, noise, seed, CFG, _loader(table))
    assert np.array_equal(x.samples - n.samples, s.samples)
    assert len(n) == len(s) == sum(utt_lens)
    validate_manifest(m)
    assert m.segments[0].start_frame == 0 and m.segments[-1].end_frame >= m.n_frames


def test_float64_input_is_snapped_and_mixed_exactly(rng):
    table = {"a": rng.standard_normal(4000) * 1e-6, "b": rng.standard_normal(3000),
             "n": rng.standard_normal(2500) * 1e3}
    s, n, x, _ = assemble_stream([Utterance("a", "p", "M", "English"), Utterance("b", "p", "M", "English")],
                                 [NoiseExcerpt("n", "Office")], 0, CFG, _loader(table))
    assert np.array_equal(x.samples - n.samples, s.samples)
    np.testing.assert_allclose(s.samples[4000:], table["b"], rtol=0, atol=2.0 ** -31)
    pcm = _wav_like(rng, 100)
    s2, *_ = assemble_stream([Utterance("a", "p", "M", "English")], [NoiseExcerpt("n", "Office")], 0, CFG,
                             _loader({"a": pcm, "n": np.zeros(100)}))
    np.testing.assert_array_equal(s2.samples, pcm)


def test_empty_orders_rejected():
    with pytest.raises(ValueError):
        assemble_stream([], [NoiseExcerpt("n", "Office")], 0)


def _m(segs, n_frames):
    return StreamManifest(tuple(Segment(*s) for s in segs), "train", 0, CFG, n_frames)


def test_labels_constant_for_single_segment():
    ts = labels_from_manifest(_m([("u", "p", "M", "English", "Office", 0, 40)], 40), "gender")
    assert np.all(ts.values == ts.values[0]) and ts.valid.all() and ts.kind == "binary"


def test_labels_switch_at_segment_boundary():
    m = _m([("u", "p", "M", "English", "Office", 0, 62), ("v", "q", "F", "English", "Office", 62, 125)], 124)
    ts = labels_from_manifest(m, "gender")
    assert len(ts) == 124
    assert set(ts.values[:62]) == {0} and set(ts.values[62:]) == {1}


def test_unlisted_accent_maps_to_other():
    m = _m([("u", "p", "M", "Welsh", "Office", 0, 10)], 10)
    ts = labels_from_manifest(m, "accent")
    assert ts.n_classes == 6
    assert set(ts.values) == {5}  # "Other" is the last class


def test_unknown_label_is_an_error():
    m = _m([("u", "p", "M", "English", "Underwater", 0, 10)], 10)
    with pytest.raises(ValueError):
        labels_from_manifest(m, "noise_category")


def test_top_accents_appends_other():
    pool = _utts([5, 4, 3, 2, 2, 1, 1])
    acc = top_accents(pool, 5)
    assert acc[:3] == ("acc0", "acc1", "acc2") and acc[-1] == "Other" and len(acc) == 6


def test_load_wav_formats(tmp_path):
    wavfile.write(tmp_path / "a.wav", 16000, np.array([0, 16384, -32768], dtype=np.int16))
    np.testing.assert_array_equal(load_wav(tmp_path / "a.wav", 16000), [0.0, 0.5, -1.0])
    wavfile.write(tmp_path / "b.wav", 16000, np.array([0.25], dtype=np.float32))
    assert load_wav(tmp_path / "b.wav", 16000).dtype == np.float64
    wavfile.write(tmp_path / "c.wav", 16000, np.zeros(4, dtype=np.int32))
    with pytest.raises(ValueError, match="PCM16 or float32"):
        load_wav(tmp_path / "c.wav", 16000)
    wavfile.write(tmp_path / "d.wav", 16000, np.zeros((4, 2), dtype=np.int16))
    with pytest.raises(ValueError, match="mono"):
        load_wav(tmp_path / "d.wav", 16000)
    with pytest.raises(ValueError, match="sample rate"):
        load_wav(tmp_path / "a.wav", 8000)


def test_speech_pool_csv(tmp_path):
    (tmp_path / "pool.csv").write_text("id,path,speaker_id,gender,accent\nu1,x.wav,p1,M,Scottish\n")
    pool = read_speech_pool(tmp_path / "pool.csv", "test")
    assert pool.split == "test" and pool.entries[0].path == str(tmp_path / "x.wav")
