import numpy as np
import pytest

from rafsim.data import gen_dataset, heatmap_targets
from rafsim.metrics import decode, eval_sweep, evaluate, pck
from rafsim.model import ModelConfig, ModelParams


def argmax_loop(hm):
    h, w, k = hm.shape
    out = []
    for c in range(k):
        best, pos = -np.inf, (0, 0)
        for r in range(h):
            for q in range(w):
                if hm[r, q, c] > best:
                    best, pos = hm[r, q, c], (r, q)
        out.append(pos)
    return np.array(out, dtype=float)


def test_one_hot_decodes_to_its_cell():
    hm = np.zeros((8, 6, 1))
    hm[3, 5, 0] = 1.0
    assert decode(hm).tolist() == [[3.0, 5.0]]


def test_ties_break_to_smallest_row_then_col():
    assert decode(np.ones((4, 4, 2))).tolist() == [[0.0, 0.0], [0.0, 0.0]]
    hm = np.zeros((4, 4, 1))
    hm[2, 1] = hm[1, 3] = hm[2, 0] = 1.0
    assert decode(hm).tolist() == [[1.0, 3.0]]


def test_decode_matches_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        hm = rng.integers(0, 4, size=(5, 7, 3)).astype(float)  # ties are common
        assert np.array_equal(decode(hm), argmax_loop(hm))


def test_decode_rejects_empty():
    with pytest.raises(ValueError):
        decode(np.zeros((0, 3, 1)))


def test_decode_maps_to_native_frame():
    hm = np.zeros((8, 6, 1))
    hm[2, 3, 0] = 1.0
    # cell (2, 3) at stride 4 covers pixels [8, 12) x [12, 16); centre (10, 14)
    assert decode(hm, 4).tolist() == [[10.0, 14.0]]
    # the 32x24 input came from a 128x96 native image
    assert decode(hm, 4, (32, 24), (128, 96)).tolist() == [[40.0, 56.0]]


def test_frame_round_trip_over_three_resolutions():
    """One-hot at the cell holding a native keypoint decodes within one native cell of it."""
    native = (128, 96)
    kp = np.array([[70.3, 41.8]])
    for res in [(32, 24), (64, 48), (128, 96)]:
        scale = np.array(res) / np.array(native)
        hm = heatmap_targets(kp * scale, *res, 4)
        hm = (hm == 1.0).astype(float)
        got = decode(hm, 4, res, native)
        cell = 4 * np.array(native) / np.array(res)
        assert np.all(np.abs(got - kp) <= cell / 2 + 1e-9)


def test_pck_basics():
    gt = np.array([[10.0, 10.0], [20.0, 20.0]])
    assert pck(gt, gt, (32, 24)) == 1.0
    assert pck(gt + 100, gt, (32, 24)) == 0.0
    with pytest.raises(ValueError):
        pck(gt[:1], gt, (32, 24))
    with pytest.raises(ValueError):
        pck(gt, gt, (32, 24), tau=0)


def test_pck_hand_count():
    # diagonal of 30x40 is 50; tau=0.1 gives a 5-pixel threshold
    gt = np.zeros((4, 2))
    pred = np.array([[3.0, 4.0], [5.0, 0.0], [0.0, 5.1], [4.0, 4.0]])  # 5, 5, 5.1, 5.66
    assert pck(pred, gt, (30, 40)) == 0.5


def test_pck_monotone_in_tau():
    rng = np.random.default_rng(1)
    gt = rng.uniform(0, 64, size=(50, 2))
    pred = gt + rng.normal(scale=6, size=(50, 2))
    vals = [pck(pred, gt, (64, 48), t) for t in (0.2, 0.1, 0.05, 0.02)]
    assert vals == sorted(vals, reverse=True)



def test_oracle_model_scores_one_at_native(monkeypatch):
    import rafsim.metrics as m

    samples = gen_dataset(4, 32, 24, 5, seed=2)
    lookup = {s.image.tobytes(): s.target for s in samples}
    monkeypatch.setattr(m, "forward_heatmap", lambda p, imgs: np.stack([lookup[i.tobytes()] for i in imgs]))
    params = ModelParams.zeros(ModelConfig())
    assert evaluate(params, samples, (32, 24)).pck == 1.0


def test_sweep_shape():
    params = ModelParams.init(ModelConfig(), 0)
    ev = gen_dataset(3, 128, 96, 5, seed=3)
    res = [(32, 24), (48, 36), (64, 48), (80, 60), (96, 72), (128, 96)]
    out = eval_sweep(params, ev, res)
    assert [r.resolution for r in out] == res
    assert all(0.0 <= r.pck <= 1.0 and r.n_samples == 3 for r in out)


def test_evaluate_rejects_empty():
    with pytest.raises(ValueError):
        evaluate(ModelParams.init(ModelConfig(), 0), [], (32, 24))
