import numpy as np
import pytest

from lipkit.autograd import Variable
from lipkit.gradcheck import check_gradients
from lipkit.model import (
    FrontendConfig,
    ModelConfig,
    SEParams,
    attach_word_boundary,
    frontend_extents,
    frontend_forward,
    init_model,
    model_forward,
    se_block,
)
from lipkit.ndtensor import Rng, ShapeError
from lipkit.nn import Param
from lipkit.recurrent import GruStackConfig


def micro_config(**kw) -> ModelConfig:
    base = dict(
        frontend=FrontendConfig(widths=[2, 2], blocks=[1, 1], se_enabled=True, se_reduction=2),
        backend=GruStackConfig(layers=2, hidden=3, bidirectional=True, inter_layer_dropout=0.0),
        num_classes=3,
        use_word_boundary=True,
        precision="float64",
    )
    base.update(kw)
    return ModelConfig(**base)


def clip(B=2, T=4, H=12, W=12, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).random((B, 1, T, H, W)).astype(dtype)


def test_frontend_shape_contract():
    cfg = micro_config()
    params = init_model(cfg, Rng(0))
    out = frontend_forward(clip(T=5), cfg, params)
    assert out.shape == (2, 5, 2)


def test_desk_frontend_extents():
    cfg = FrontendConfig()
    # 88 -> stem 44 -> pool 22 -> stages 22, 11, 6, 3
    assert frontend_extents(cfg, 88, 88) == [(44, 44), (22, 22), (22, 22), (11, 11), (6, 6), (3, 3)]
    model = ModelConfig(frontend=cfg)
    assert model.feature_width == 64


def test_frontend_rejects_bad_input():
    cfg = micro_config()
    params = init_model(cfg, Rng(0))
    with pytest.raises(ShapeError):
        frontend_forward(np.zeros((1, 3, 4, 12, 12)), cfg, params)
    with pytest.raises(ShapeError):
        frontend_forward(np.zeros((1, 1, 4, 2, 2)), cfg, params)


def test_desk_parameter_count():
    cfg = ModelConfig()
    n = init_model(cfg, Rng(0)).count()
    conv = lambda ci, co, k: ci * co * k  # noqa: E731
    bn = lambda c: 2 * c  # noqa: E731
    stem = conv(1, 8, 5 * 7 * 7) + bn(8)
    layer1 = 2 * (conv(8, 8, 9) + bn(8))
    stages = layer1
    for ci, co in [(8, 16), (16, 32), (32, 64)]:
        stages += conv(ci, co, 9) + bn(co) + conv(co, co, 9) + bn(co) + conv(ci, co, 1) + bn(co)
    h = 64
    gru_dir = lambda d: 3 * h * d + 3 * h * h + 4 * h  # noqa: E731
    gru = 2 * gru_dir(64) + 2 * 2 * gru_dir(128)
    fc = 10 * 128 + 10
    assert n == stem + stages + gru + fc == 278_530


def test_parameter_count_is_a_function_of_config():
    cfg = micro_config()
    assert init_model(cfg, Rng(0)).count() == init_model(cfg, Rng(99)).count() == 1009


def test_se_zero_weights_halve_input():
    x = Variable(np.random.default_rng(0).normal(size=(2, 4, 3, 3)))
    se = SEParams(Param(np.zeros((2, 4)), "W1"), Param(np.zeros((4, 2)), "W2"))
    np.testing.assert_allclose(se_block(x, se).data, x.data / 2)


def test_se_hand_gate():
    # channels are constant maps 1 and 3; s = [1, 3]
    x = np.stack([np.full((2, 2), 1.0), np.full((2, 2), 3.0)])[None]
    W1 = np.array([[0.5, 0.25]])         # hidden = relu(0.5 + 0.75) = 1.25
    W2 = np.array([[2.0], [-1.0]])       # pre-gates 2.5, -1.25
    out = se_block(Variable(x), SEParams(Param(W1, "W1"), Param(W2, "W2"))).data
    g = 1 / (1 + np.exp(-np.array([2.5, -1.25])))
    np.testing.assert_allclose(out[0, :, 0, 0], [1.0 * g[0], 3.0 * g[1]], rtol=1e-12)


def test_se_gates_in_open_interval_and_symmetric():
    rng = np.random.default_rng(3)
    x = Variable(np.tile(rng.normal(size=(1, 1, 3, 3)), (1, 4, 1, 1)))
    W1 = np.full((2, 4), 0.3)
    W2 = np.full((4, 2), -0.7)
    out = se_block(x, SEParams(Param(W1, "W1"), Param(W2, "W2"))).data
    ratios = out[0, :, 0, 0] / x.data[0, :, 0, 0]
    assert np.all((ratios > 0) & (ratios < 1))
    np.testing.assert_allclose(ratios, ratios[0])


def test_se_reduction_must_divide_width():
    with pytest.raises(ValueError):
        ModelConfig(frontend=FrontendConfig(widths=[6, 8], blocks=[1, 1], se_enabled=True, se_reduction=4)).validate()


def test_attach_word_boundary_examples():
    f = Variable(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    out = attach_word_boundary(f, np.array([0.0, 1.0])).data
    np.testing.assert_array_equal(out, [[[1, 2, 0], [3, 4, 1]]])
    ones = attach_word_boundary(Variable(np.zeros((2, 3, 4))), np.ones((2, 3))).data
    np.testing.assert_array_equal(ones[..., -1], 1.0)
    with pytest.raises(ShapeError):
        attach_word_boundary(f, np.ones(3))


def test_word_boundary_flag_changes_gru_input_width():
    on = init_model(micro_config(), Rng(0))
    off = init_model(micro_config(use_word_boundary=False), Rng(0))
    assert on.gru[0][0].input_width == 3 and off.gru[0][0].input_width == 2


def test_model_forward_contract():
    cfg = micro_config()
    params = init_model(cfg, Rng(0))
    x = clip()
    mask = np.array([[0, 1, 1, 0], [1, 1, 0, 0]], float)
    a = model_forward(x, cfg, params, mask).data
    b = model_forward(x, cfg, params, mask).data
    assert a.shape == (2, 3)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        model_forward(x, cfg, params, None)


def test_boundary_changes_logits():
    cfg = micro_config()
    params = init_model(cfg, Rng(0))
    x = clip()
    a = model_forward(x, cfg, params, np.ones((2, 4))).data
    b = model_forward(x, cfg, params, np.zeros((2, 4))).data
    assert not np.allclose(a, b)


@pytest.mark.parametrize("fc_init, bound", [("unit", 1.0), ("scaled", np.sqrt(2 / (6 + 3)))])
def test_fc_init_modes(fc_init, bound):
    p = init_model(micro_config(fc_init=fc_init), Rng(0))
    assert np.abs(p.fc_w.data).max() <= bound


@pytest.mark.parametrize("seed, T, H", [(0, 4, 12), (1, 3, 12), (2, 4, 14), (3, 5, 12), (4, 2, 13)])
def test_micro_model_gradients(seed, T, H):
    cfg = micro_config()
    params = init_model(cfg, Rng(seed))
    x = Variable(clip(B=2, T=T, H=H, W=H, seed=seed), requires_grad=True)
    mask = np.zeros((2, T))
    mask[:, 1:] = 1.0
    # train mode: batch statistics are part of the differentiated function
    fn = lambda: model_forward(x, cfg, params, mask, mode="train")  # noqa: E731
    err = check_gradients(fn, [x] + params.params(), max_coords=6, rng=Rng(seed))
    assert err <= 1e-4
