import numpy as np
import pytest

from maskprobe.core import MaskTensor
from maskprobe.features import filter_masks
from maskprobe.inferbank import (
    ROSTER,
    ROSTER_NAMES,
    PredictorBank,
    compile_bank,
    gather_bank_columns,
    infer_frame,
    infer_frames,
    op_count,
    roster_order,
    roster_outputs,
    split_bank,
    stream_infer,
)
from maskprobe.probes import ProbeModel, predict_frame


def _roster_models(D, rng, space=None):
    space = space or {"type": "masks"}
    out = []
    for name, kind, k, iqr in ROSTER:
        rows = k if kind == "multiclass" else 1
        out.append(ProbeModel(name, kind, rng.standard_normal((rows, D)), rng.standard_normal(rows),
                              space, 0.01, k, iqr))
    return out


def test_roster_has_11_tasks_21_outputs():
    assert len(ROSTER_NAMES) == 11
    assert roster_outputs() == 21


def test_single_regression_bank(rng):
    bank = compile_bank([ProbeModel("snr_in", "continuous", rng.standard_normal((1, 5)), [0.1], {}, 0.01)])
    assert bank.n_outputs == 1


def test_full_roster_bank_and_op_count(rng):
    bank = compile_bank(_roster_models(202, rng))
    assert bank.n_outputs == 21
    assert op_count(bank, 0) == {"adds": 21, "worst_case": 4242}
    assert op_count(bank, 50)["adds"] == 1071
    assert bank.output_names()[:5] == ["vad", "gender", "accent.0", "accent.1", "accent.2"]


def test_op_count_monotone():
    for K in (1, 5, 21):
        for C in (1, 64, 202):
            assert op_count(K, 0, C)["worst_case"] == K * C
            assert op_count(K + 1, 0, C)["worst_case"] > op_count(K, 0, C)["worst_case"]
            assert op_count(K, 0, C + 1)["worst_case"] > op_count(K, 0, C)["worst_case"]
    with pytest.raises(ValueError):
        op_count(21, 203, 202)


def test_compile_split_round_trip(rng):
    models = _roster_models(10, rng)
    back = split_bank(compile_bank(models))
    for a, b in zip(models, back):
        assert a.name == b.name
        assert a.weights.tobytes() == b.weights.tobytes()
        assert a.bias.tobytes() == b.bias.tobytes()


def test_heterogeneous_spaces_rejected(rng):
    a = ProbeModel("a", "continuous", np.ones((1, 3)), [0.0], {"type": "masks", "channel_map": [1, 2, 3]}, 0.01)
    b = ProbeModel("b", "continuous", np.ones((1, 3)), [0.0], {"type": "masks", "channel_map": [1, 2, 4]}, 0.01)
    with pytest.raises(ValueError):
        compile_bank([a, b])


def test_infer_frame_examples(rng):
    bank = compile_bank(_roster_models(12, rng))
    np.testing.assert_array_equal(infer_frame(bank, []), bank.bias)
    np.testing.assert_allclose(infer_frame(bank, range(12)), bank.bias + bank.weights.sum(axis=1), rtol=1e-12)
    with pytest.raises(IndexError):
        infer_frame(bank, [12])
    with pytest.raises(ValueError):
        infer_frame(bank, [3, 2])


def _dense_ordered(bank, bits):
    # dense product with the same left-to-right accumulation over channels
    out = bank.bias.copy()
    for c in range(bank.n_features):
        out = out + bank.weights[:, c] * bits[c] if bits[c] else out
    return out


def test_gather_sum_is_bit_exact(rng):
    bank = compile_bank(_roster_models(64, rng))
    bits = (rng.random((300, 64)) < 0.3).astype(np.uint8)
    batch = infer_frames(bank, bits)
    for l in range(bits.shape[0]):
        one = infer_frame(bank, np.flatnonzero(bits[l]))
        assert one.tobytes() == _dense_ordered(bank, bits[l]).tobytes()
        assert one.tobytes() == batch[l].tobytes()


def test_stream_infer_matches_predict_frame(rng):
    models = _roster_models(20, rng)
    bank = compile_bank(models)
    bits = (rng.random((40, 20)) < 0.5).astype(np.uint8)
    table = stream_infer(bank, bits)
    assert len(table) == 40
    for m in models:
        for l in range(40):
            p = predict_frame(m, bits[l].astype(float))
            if m.kind == "continuous":
                col = table.columns.index(m.name)
                assert table.scores[l, col] == pytest.approx(p, abs=1e-12)
            else:
                assert table.classes[m.name][l] == p


def test_stream_infer_constant_and_empty(rng):
    bank = compile_bank(_roster_models(8, rng))
    frames = np.tile((rng.random(8) < 0.5).astype(np.uint8), (5, 1))
    t = stream_infer(bank, frames)
    assert np.all(t.scores == t.scores[0])
    assert len(stream_infer(bank, np.zeros((0, 8), dtype=np.uint8))) == 0
    with pytest.raises(ValueError):
        stream_infer(bank, np.zeros((3, 9), dtype=np.uint8))


def test_bank_save_load_and_csv(tmp_path, rng):
    bank = compile_bank(roster_order(_roster_models(6, rng)[::-1]))
    assert [m["name"] for m in bank.models] == list(ROSTER_NAMES)
    bank.save(tmp_path / "bank.json")
    back = PredictorBank.load(tmp_path / "bank.json")
    assert back.weights.tobytes() == bank.weights.tobytes()
    t = stream_infer(back, np.ones((2, 6), dtype=np.uint8))
    t.write_csv(tmp_path / "p.csv")
    header = (tmp_path / "p.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["frame", "vad", "gender"]
    assert "accent.5" in header and header[-1] == "noise_category.class"


def test_gather_bank_columns_from_full_tensor(rng):
    bits = (rng.random((30, 16)) < 0.5).astype(np.uint8)
    bits[:, [0, 5]] = 1
    fm = filter_masks(MaskTensor(bits, 2, 8))
    space = {"type": "masks", "channel_map": fm.channel_map.tolist()}
    bank = compile_bank([ProbeModel("x", "continuous", np.ones((1, fm.n_kept)), [0.0], space, 0.01)])
    np.testing.assert_array_equal(gather_bank_columns(bank, MaskTensor(bits, 2, 8)), fm.bits)
    np.testing.assert_array_equal(gather_bank_columns(bank, fm), fm.bits)
