import numpy as np
import pytest

from scenematch import autograd as ag
from scenematch.model import ModelConfig, forward, init_params, pair_loss, predict
from scenematch.synth import PairConfig, generate_pair

from conftest import permute_pair

CFG = ModelConfig(C=8, layers=2, scale_dims=(4, 4, 4, 4), train_iters=20, infer_iters=20)


@pytest.fixture(scope="module")
def pair():
    return generate_pair(PairConfig(M=10, N=13, scale_dims=(4, 4, 4, 4)), 5)


def flat(params):
    if isinstance(params, ag.Tensor):
        return [params.data]
    values = params.values() if isinstance(params, dict) else params
    return [a for v in values for a in flat(v)]


def test_forward_shapes(pair):
    out = forward(init_params(CFG, 0), pair, CFG)
    assert out["log_p"].shape == (11, 14)
    assert out["vis_s"].shape == (10, 2) and out["vis_t"].shape == (13, 2)
    assert out["desc_s"].shape == (10, 8)
    np.testing.assert_allclose(out["vis_s"].data.sum(axis=1), 1.0, atol=1e-12)


def test_init_is_seeded():
    a, b, c = (flat(init_params(CFG, s)) for s in (3, 3, 4))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_loss_is_finite_and_split(pair):
    total, lf, ls = pair_loss(init_params(CFG, 0), pair, CFG)
    assert total.item() == pytest.approx(lf.item() + CFG.alpha * ls.item(), abs=1e-12)
    assert lf.item() > 0 and ls.item() > 0


def test_predict_is_partial_bijection(pair):
    pred = predict(init_params(CFG, 1), pair, CFG)
    rows = [i for i, _, _ in pred.matches]
    cols = [j for _, j, _ in pred.matches]
    assert len(set(rows)) == len(rows) and len(set(cols)) == len(cols)
    assert all(c >= CFG.match_threshold for _, _, c in pred.matches)


def test_predict_builds_no_graph(pair):
    with ag.Tape() as tape:
        predict(init_params(CFG, 1), pair, CFG)
    assert tape.nodes == []


def test_equivariant_under_keypoint_order(pair):
    params = init_params(CFG, 2)
    rng = np.random.default_rng(0)
    ps, pt = rng.permutation(10), rng.permutation(13)
    base = forward(params, pair, CFG)["log_p"].data
    moved = forward(params, permute_pair(pair, ps, pt), CFG)["log_p"].data
    expected = base[np.append(ps, 10)][:, np.append(pt, 13)]
    np.testing.assert_allclose(moved, expected, atol=1e-10)
