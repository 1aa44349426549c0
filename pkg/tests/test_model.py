import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlsplit import tensor as T
from mtlsplit.errors import DimensionError, FormatError
from mtlsplit.model import (
    MtlModel,
    ModelConfig,
    backbone_forward,
    checkpoint_bytes,
    flatten_feature,
    head_forward,
    load_checkpoint,
    model_from_bytes,
    predict_all,
    save_checkpoint,
    unflatten_feature,
)
from mtlsplit.rng import Rng
from mtlsplit.tensor import Tape, backward, finite_difference_grad
from mtlsplit.trainer import task_losses

from oracles import (
    f64_total_loss,
    flatten_params,
    loop_predict,
    random_desk_config,
    smooth_random_model,
    unflatten_params,
)

TINY = ModelConfig(input_shape=(2, 2, 1), backbone_widths=(), feature_len=4, head_hidden_width=3,
                   tasks=(("a", 2), ("b", 3)))


def images(cfg, n, seed=0):
    return Rng(seed).random(n * cfg.input_len).reshape((n,) + cfg.input_shape).astype(np.float32)


def test_zero_backbone_gives_zero_feature():
    m = MtlModel.init(TINY, 0)
    for k in m.backbone_names():
        m.params[k][...] = 0
    z = backbone_forward(m, images(TINY, 1)[0])
    assert z.shape == (4,)
    assert np.array_equal(z.data, np.zeros(4))


def test_identity_layer_passes_nonnegative_input():
    m = MtlModel.init(TINY, 0)
    m.params["backbone.0.weight"] = np.eye(4, dtype=np.float32)
    x = np.array([0.5, 0.0, 1.0, 0.25], np.float32).reshape(2, 2, 1)
    assert np.array_equal(backbone_forward(m, x).data, x.reshape(-1))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_equals_loop_oracle_bitwise(seed):
    cfg = random_desk_config(seed)
    m = MtlModel.init(cfg, seed)
    for k in m.params:
        if k.endswith("bias"):
            m.params[k] = Rng(seed + 99).uniform(-0.1, 0.1, m.params[k].size).astype(np.float32)
    x = images(cfg, 5, seed)
    ours = predict_all(m, x)
    ref = loop_predict(m, x)
    for a, b in zip(ours, ref):
        assert a.data.tobytes() == b.tobytes()


def test_predict_all_is_backbone_then_heads():
    m = MtlModel.init(ModelConfig(), 3)
    x = images(m.config, 1, 3)[0]
    z = backbone_forward(m, x)
    direct = [head_forward(m, j, z) for j in range(m.n_tasks)]
    for a, b in zip(predict_all(m, x), direct):
        assert np.array_equal(a.data, b.data)


def test_backbone_runs_once_per_predict_all():
    m = MtlModel.init(ModelConfig(), 3)
    tape = Tape()
    params = m.bind(tape)
    predict_all(m, images(m.config, 2), params)
    # one matmul per backbone layer plus two per head
    assert tape.count("matmul") == len(m.config.backbone_widths) + 1 + 2 * m.n_tasks


def test_input_shape_mismatch():
    m = MtlModel.init(TINY, 0)
    with pytest.raises(DimensionError):
        backbone_forward(m, np.zeros((3, 3, 1), np.float32))
    with pytest.raises(DimensionError):
        head_forward(m, 0, np.zeros(5, np.float32))
    with pytest.raises(IndexError):
        head_forward(m, 2, np.zeros(4, np.float32))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, width=32), min_size=1, max_size=64))
def test_feature_flatten_roundtrip(values):
    z = np.asarray(values, np.float32)
    back = unflatten_feature(flatten_feature(T.Tensor(z)), z.shape)
    assert back.data.tobytes() == z.tobytes()


def test_every_parameter_reached_by_gradient():
    m, x, y = smooth_random_model(4, ModelConfig(), 8)
    tape = Tape()
    _, total = task_losses(m, x, y, m.bind(tape))
    grads = backward(tape, total)
    for name, g in grads.items():
        assert np.any(g.data != 0), name


def test_heads_only_see_their_own_loss():
    m, x, y = smooth_random_model(5, ModelConfig(), 8)
    tape = Tape()
    losses, _ = task_losses(m, x, y, m.bind(tape))
    grads = backward(tape, losses[1])
    assert all(np.all(grads[n].data == 0) for n in m.head_names(0) + m.head_names(2))
    assert all(np.any(grads[n].data != 0) for n in m.head_names(1))


def test_gradients_match_finite_differences_on_random_models():
    """Twenty random small models, analytic vs central differences."""
    start = time.perf_counter()
    for seed in range(20):
        cfg = random_desk_config(seed)
        model, x, y = smooth_random_model(seed, cfg, 3)
        assert model.param_count() < 5000
        tape = Tape()
        _, total = task_losses(model, x, y, model.bind(tape))
        grads = backward(tape, total)
        names, flat = flatten_params(model)
        analytic = np.concatenate([grads[n].data.ravel().astype(np.float64) for n in names])

        patterns: list = []
        fd = finite_difference_grad(
            lambda v: f64_total_loss(cfg, unflatten_params(model, names, v), x, y, patterns), flat, 1e-3)
        assert len(set(patterns)) == 1, "perturbation crossed a relu kink"

        err = np.abs(analytic - fd)
        big = np.abs(fd) > 1e-3
        rel = err[big] / np.abs(fd[big])
        assert np.all(rel < 1e-4), (seed, rel.max())
        assert np.all(err[~big] < 1e-6), (seed, err[~big].max())
    assert time.perf_counter() - start < 30


def test_checkpoint_roundtrip(tmp_path):
    m = MtlModel.init(ModelConfig(), 11)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.config == m.config and back.part == m.part
    assert list(back.params) == list(m.params)
    for k in m.params:
        assert back.params[k].tobytes() == m.params[k].tobytes()


def test_checkpoint_keeps_split_part():
    edge, server = MtlModel.init(TINY, 1).split()
    assert model_from_bytes(checkpoint_bytes(edge)).part == "backbone"
    assert model_from_bytes(checkpoint_bytes(server)).part == "heads"


def test_checkpoint_rejects_garbage():
    with pytest.raises(FormatError):
        model_from_bytes(b"nope")
    data = checkpoint_bytes(MtlModel.init(TINY, 1))
    with pytest.raises(FormatError):
        model_from_bytes(data[:-3])


def test_split_partitions_parameters():
    m = MtlModel.init(ModelConfig(), 2)
    edge, server = m.split()
    assert set(edge.params) | set(server.params) == set(m.params)
    assert not set(edge.params) & set(server.params)
    x = images(m.config, 2)
    z = backbone_forward(edge, x)
    for j in range(m.n_tasks):
        assert np.array_equal(head_forward(server, j, z).data, predict_all(m, x)[j].data)


def test_add_task_keeps_existing_parameters():
    m = MtlModel.init(TINY, 2)
    m2 = m.add_task("c", 5, 9)
    assert m2.n_tasks == 3
    for k, v in m.params.items():
        assert np.array_equal(m2.params[k], v)
    assert m2.params["head.2.fc2.weight"].shape == (3, 5)
