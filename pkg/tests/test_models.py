# -*- coding: utf-8 -*-
import numpy as np
import pytest

from depthCore.autodiff import GROUP_NAMES, ShapeError
from depthCore.models import (
    AdaptDepthModel,
    Checkpoint,
    DepthRange,
    ModelConfig,
    depth_to_disp,
    disp_to_depth,
)


def test_partition_covers_every_tensor_once(tiny_model):
    grupos = tiny_model.partition()
    assert tuple(grupos) == GROUP_NAMES
    assert all(len(g) > 0 for g in grupos.values())
    assert sum(len(g) for g in grupos.values()) == tiny_model.num_tensors()
    ids = [id(t) for g in grupos.values() for _, t in g]
    assert len(ids) == len(set(ids))


def test_group_of_qualified_and_local_names(tiny_model):
    assert tiny_model.group_of("depth_encoder.stem.conv.weight") == "depth_encoder"
    assert tiny_model.group_of("pose.weight") == "pose_decoder"
    assert tiny_model.group_of("dispconv0.weight") == "depth_decoder"
    with pytest.raises(KeyError):
        tiny_model.group_of("stem.conv.weight")
    with pytest.raises(KeyError):
        tiny_model.group_of("no.existe")


def test_depth_forward_gives_disparities_in_open_unit_interval(tiny_model, tiny_bundles):
    disps = tiny_model.depth_forward(tiny_bundles[0].target)
    assert [d.shape for d in disps] == [(1, 1, 32, 64), (1, 1, 16, 32)]
    for d in disps:
        assert np.all(d.data > 0) and np.all(d.data < 1)


def test_pose_forward_shape_and_scale(tiny_model, tiny_bundles):
    b = tiny_bundles[1]
    v = tiny_model.pose_forward(b.target, b.prev)
    pre = tiny_model.pose_pre_activation(b.target, b.prev)
    assert v.shape == (1, 6)
    np.testing.assert_allclose(v.data, pre.data * tiny_model.config.pose_scale, rtol=1e-6)


def test_wrong_input_shape_is_rejected(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model.depth_forward(np.zeros((3, 16, 64), dtype=np.float32))
    with pytest.raises(ShapeError):
        tiny_model.depth_forward(np.zeros((1, 32, 64), dtype=np.float32))


def test_subcomponents_are_subsets_of_their_group(tiny_model):
    primera = tiny_model.component("depth_encoder.first_layer")
    assert list(primera.tensors) == ["stem.conv.weight"]
    ultimo = tiny_model.component("pose_encoder.last_block")
    assert ultimo.name == "pose_encoder"
    assert ultimo.tensors and all(n.startswith("stage4.block0.") for n in ultimo.tensors)
    grupo = tiny_model.groups["pose_encoder"].tensors
    assert all(ultimo.tensors[n] is grupo[n] for n in ultimo.tensors)
    with pytest.raises(KeyError):
        tiny_model.component("depth_decoder.first_layer")
    with pytest.raises(KeyError):
        tiny_model.component("depth_encoder.middle")
    with pytest.raises(KeyError):
        tiny_model.component("encoder")


def test_same_seed_same_weights(tiny_config):
    a = AdaptDepthModel(tiny_config, seed=3).to_checkpoint()
    b = AdaptDepthModel(tiny_config, seed=3).to_checkpoint()
    c = AdaptDepthModel(tiny_config, seed=4).to_checkpoint()
    w = "stem.conv.weight"
    np.testing.assert_array_equal(a.groups["depth_encoder"][w], b.groups["depth_encoder"][w])
    assert not np.array_equal(a.groups["depth_encoder"][w], c.groups["depth_encoder"][w])


def test_checkpoint_is_a_copy(tiny_model, tiny_checkpoint):
    antes = tiny_checkpoint.groups["depth_decoder"]["dispconv0.weight"].copy()
    t = tiny_model.groups["depth_decoder"].tensors["dispconv0.weight"]
    t.data = t.data + 1.0
    np.testing.assert_array_equal(tiny_checkpoint.groups["depth_decoder"]["dispconv0.weight"], antes)

    copia = AdaptDepthModel.from_checkpoint(tiny_checkpoint)
    u = copia.groups["depth_decoder"].tensors["dispconv0.weight"]
    u.data += 5.0
    np.testing.assert_array_equal(tiny_checkpoint.groups["depth_decoder"]["dispconv0.weight"], antes)


def test_from_checkpoint_reproduces_predictions(tiny_model, tiny_bundles):
    img = tiny_bundles[0].target
    copia = AdaptDepthModel.from_checkpoint(tiny_model.to_checkpoint({"seed": 0}))
    np.testing.assert_array_equal(copia.depth_forward(img)[0].data, tiny_model.depth_forward(img)[0].data)


def test_checkpoint_requires_all_groups(tiny_checkpoint):
    grupos = dict(tiny_checkpoint.groups)
    grupos.pop("pose_decoder")
    with pytest.raises(ValueError):
        Checkpoint(1, tiny_checkpoint.hyperparameters, grupos)


def test_checkpoint_shape_mismatch(tiny_checkpoint):
    grupos = {n: dict(g) for n, g in tiny_checkpoint.groups.items()}
    grupos["pose_decoder"]["pose.bias"] = np.zeros(7, dtype=np.float32)
    with pytest.raises(ShapeError):
        AdaptDepthModel.from_checkpoint(Checkpoint(1, tiny_checkpoint.hyperparameters, grupos))


def test_norm_stats_update_only_when_unfrozen(tiny_model, tiny_bundles):
    img = tiny_bundles[0].target
    antes = tiny_model.norm_state()
    tiny_model.depth_forward(img)
    despues = tiny_model.norm_state()
    for grupo in GROUP_NAMES:
        for k in antes[grupo]:
            np.testing.assert_array_equal(antes[grupo][k], despues[grupo][k])

    tiny_model.set_norm_frozen(False, ["depth_encoder"])
    tiny_model.depth_forward(img)
    movido = tiny_model.norm_state()
    assert not np.array_equal(movido["depth_encoder"]["stem.bn.running_mean"], antes["depth_encoder"]["stem.bn.running_mean"])
    np.testing.assert_array_equal(movido["pose_encoder"]["stem.bn.running_mean"], antes["pose_encoder"]["stem.bn.running_mean"])


def test_eval_norm_restores_flags(tiny_model):
    tiny_model.set_norm_frozen(False)
    with tiny_model.eval_norm():
        assert all(g.norm_stats_frozen for g in tiny_model.groups.values())
    assert not any(g.norm_stats_frozen for g in tiny_model.groups.values())


def test_clone_keeps_flags_and_values(tiny_model):
    tiny_model.set_trainable(["depth_decoder"])
    copia = tiny_model.clone()
    assert [g.trainable for g in copia.groups.values()] == [False, True, False, False]
    a = tiny_model.groups["depth_encoder"].tensors["stem.conv.weight"]
    b = copia.groups["depth_encoder"].tensors["stem.conv.weight"]
    assert a is not b
    np.testing.assert_array_equal(a.data, b.data)


def test_disp_to_depth_range():
    rango = DepthRange(0.1, 100.0)
    np.testing.assert_allclose(disp_to_depth(np.array([0.0, 1.0]), rango).data, [100.0, 0.1], rtol=1e-5)
    d = np.array([0.5, 3.0, 42.0])
    np.testing.assert_allclose(disp_to_depth(depth_to_disp(d, rango), rango).data, d, rtol=1e-5)
    with pytest.raises(ValueError):
        disp_to_depth(np.array([1.5]))
    with pytest.raises(ValueError):
        DepthRange(1.0, 0.5)


def test_model_config_validation_and_round_trip(tiny_config):
    assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config
    with pytest.raises(ValueError):
        ModelConfig(height=30)
    with pytest.raises(ValueError):
        ModelConfig(scales=5)
    with pytest.raises(ValueError):
        ModelConfig(encoder_widths=(4, 8, 8))
