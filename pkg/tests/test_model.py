from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY_VOC_CFG, VOC_NAMES
from oracles import TINY_VOC_CONV_TABLE, tiny_voc_float_count
from yolo_offload.model import (CfgParseError, ConvLayer, InputResolution, LayerSpec, PoolLayer,
                                RegionLayer, UnsupportedVersionError, WeightsError, build_model,
                                expected_float_count, load_model, load_weights, parse_cfg,
                                serialize_cfg, set_input_size, synthetic_weights)
from yolo_offload.nnet import ShapeError

TINY_FLOATS = 15_867_885  # frozen from oracles.tiny_voc_float_count()

SMALL_CFG = """[net]
width=64
height=64
channels=3

[convolutional]
batch_normalize=1
filters=4
size=3
stride=1
pad=1
activation=leaky

[maxpool]
size=2
stride=2

[convolutional]
filters=12
size=1
stride=1
activation=linear

[region]
anchors=1,1, 2,3
classes=1
num=2
"""


def small_model(input_size=None, seed=0, version=(0, 2, 0)):
    specs = parse_cfg(SMALL_CFG)
    return build_model(specs, synthetic_weights(specs, seed, version), input_size=input_size)


def test_parse_minimal_example():
    specs = parse_cfg("[net]\nwidth=416\n[convolutional]\nfilters=16\n")
    assert [s.kind for s in specs] == ["net", "convolutional"]
    assert specs[1].attributes == {"filters": "16"}


def test_parse_skips_comments_and_whitespace():
    specs = parse_cfg("# c\n[net]\n ; x\n  width = 32 \n\n")
    assert specs[0].attributes == {"width": "32"}


@pytest.mark.parametrize("text, fragment", [
    ("[convolutional]\nfilters=1\n", "missing [net]"),
    ("", "missing [net]"),
    ("[net]\n[route]\nlayers=-1\n", "unsupported layer [route]"),
    ("[net]\n[reorg]\nstride=2\n", "unsupported layer [reorg]"),
    ("[net]\n[bogus]\n", "unknown section"),
    ("[net]\nwidth=1\nwidth=2\n", "duplicate key"),
    ("[net]\nnonsense\n", "malformed line"),
    ("[net\n", "malformed section"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(CfgParseError) as err:
        parse_cfg(text)
    assert fragment in str(err.value)


def test_parse_error_reports_line():
    with pytest.raises(CfgParseError) as err:
        parse_cfg("[net]\nwidth=1\n\n[route]\n")
    assert err.value.line == 4


def test_fixture_layer_counts(tiny_voc_specs):
    kinds = [s.kind for s in tiny_voc_specs]
    assert kinds.count("convolutional") == 9
    assert kinds.count("maxpool") == 6
    assert kinds.count("region") == 1


def test_fixture_round_trip(tiny_voc_specs):
    again = parse_cfg(serialize_cfg(tiny_voc_specs))
    assert again == tiny_voc_specs
    assert serialize_cfg(again) == serialize_cfg(tiny_voc_specs)


keys = st.text("abcdefghij_", min_size=1, max_size=8)
values = st.text("abcdefghij0123456789.,-", min_size=1, max_size=10)
sections = st.lists(st.tuples(st.sampled_from(["convolutional", "maxpool", "region"]),
                              st.dictionaries(keys, values, max_size=5)), max_size=6)


@given(st.dictionaries(keys, values, max_size=5), sections)
@settings(max_examples=200, deadline=None)
def test_serialize_parse_fixed_point(net_attrs, body):
    specs = [LayerSpec("net", net_attrs)] + [LayerSpec(k, a) for k, a in body]
    text = serialize_cfg(specs)
    assert parse_cfg(text) == specs
    assert serialize_cfg(parse_cfg(text)) == text


def test_float_count_matches_independent_arithmetic(tiny_voc_specs):
    assert tiny_voc_float_count() == TINY_FLOATS
    assert expected_float_count(tiny_voc_specs) == TINY_FLOATS


def test_fixture_model_structure(tiny_voc_model):
    convs = [layer for layer in tiny_voc_model.layers if isinstance(layer, ConvLayer)]
    assert [c.params.out_channels for c in convs] == [f for f, _, _ in TINY_VOC_CONV_TABLE]
    assert sum(isinstance(layer, PoolLayer) for layer in tiny_voc_model.layers) == 6
    assert isinstance(tiny_voc_model.layers[-1], RegionLayer)
    assert tiny_voc_model.anchors[0] == (1.08, 1.19)
    assert tiny_voc_model.num_anchors == 5 and tiny_voc_model.num_classes == 20
    assert tiny_voc_model.class_names[-1] == "tvmonitor"


def test_load_from_files(tmp_path, tiny_voc_weights):
    path = tmp_path / "w.weights"
    path.write_bytes(tiny_voc_weights)
    model = load_model(TINY_VOC_CFG, path, VOC_NAMES, input_size=320)
    assert model.input_size == 320 and model.grid == 10


@pytest.mark.parametrize("version", [(0, 1, 0), (0, 2, 0), (1, 0, 0)])
def test_supported_header_versions(version):
    model = small_model(version=version)
    assert model.parameter_checksum() == small_model(version=(0, 2, 0)).parameter_checksum()


def test_header_seen_width():
    specs = parse_cfg(SMALL_CFG)
    narrow = synthetic_weights(specs, version=(0, 1, 0))
    wide = synthetic_weights(specs, version=(0, 2, 0))
    assert len(wide) - len(narrow) == 4
    assert struct.unpack_from("<3i", wide) == (0, 2, 0)


def test_unsupported_version():
    data = bytearray(synthetic_weights(parse_cfg(SMALL_CFG)))
    struct.pack_into("<3i", data, 0, 2, 0, 0)
    with pytest.raises(UnsupportedVersionError):
        load_weights(parse_cfg(SMALL_CFG), bytes(data))


@pytest.mark.parametrize("delta, fragment", [(-4, "1 missing"), (4, "1 trailing")])
def test_float_count_mismatch(delta, fragment):
    specs = parse_cfg(SMALL_CFG)
    data = synthetic_weights(specs)
    data = data[:delta] if delta < 0 else data + b"\0" * delta
    with pytest.raises(WeightsError) as err:
        load_weights(specs, data)
    assert fragment in str(err.value)
    assert str(expected_float_count(specs)) in str(err.value)


def test_fixture_truncated_by_one_float(tiny_voc_specs, tiny_voc_weights):
    with pytest.raises(WeightsError, match="1 missing"):
        load_weights(tiny_voc_specs, tiny_voc_weights[:-4])


def test_negative_variance_in_file():
    specs = parse_cfg(SMALL_CFG)
    data = bytearray(synthetic_weights(specs))
    # layer 0: bias[4], gamma[4], mean[4], var[4]; poison the first variance
    struct.pack_into("<f", data, 20 + 4 * 12, -1.0)
    with pytest.raises(WeightsError, match="variance"):
        load_weights(specs, bytes(data))


def test_input_resolution_schedule():
    assert InputResolution.from_schedule(0).side == 320
    assert InputResolution.from_schedule(3).side == 416
    with pytest.raises(ValueError):
        InputResolution(330)


def test_set_input_size_examples(tiny_voc_model):
    assert set_input_size(tiny_voc_model, 320).grid == 10
    assert set_input_size(tiny_voc_model, 416).grid == 13
    with pytest.raises(ValueError):
        set_input_size(tiny_voc_model, 330)


def test_set_input_size_keeps_parameters(tiny_voc_model):
    other = tiny_voc_model.with_input_size(InputResolution(160))
    assert other.parameter_checksum() == tiny_voc_model.parameter_checksum()
    assert tiny_voc_model.input_size == 416


@pytest.mark.parametrize("side", [64, 96, 160, 320])
def test_forward_shape_law(side):
    model = small_model(input_size=side)
    out = model(np.zeros((1, 3, side, side), np.float32))
    assert out.shape == (1, 12, side // 2, side // 2)


def test_fixture_forward_shape(tiny_voc_model):
    m = tiny_voc_model.with_input_size(160)
    out = m(np.full((1, 3, 160, 160), 0.5, np.float32))
    assert out.shape == (1, 125, 5, 5)
    assert np.all(np.isfinite(out))


def test_zero_weights_give_zero_output():
    model = build_model(parse_cfg(SMALL_CFG))
    x = np.random.default_rng(0).random((1, 3, 64, 64), dtype=np.float32)
    assert not np.any(model(x))


def test_forward_rejects_wrong_shape():
    with pytest.raises(ShapeError):
        small_model()(np.zeros((1, 3, 32, 32), np.float32))


def test_forward_deterministic():
    model = small_model(seed=3)
    x = np.random.default_rng(1).random((1, 3, 64, 64), dtype=np.float32)
    assert model(x).tobytes() == model(x.copy()).tobytes()


def test_region_channel_mismatch():
    bad = SMALL_CFG.replace("filters=12", "filters=11")
    with pytest.raises(ShapeError):
        build_model(parse_cfg(bad))


def test_unsupported_activation():
    bad = SMALL_CFG.replace("activation=linear", "activation=mish")
    with pytest.raises(CfgParseError, match="activation"):
        build_model(parse_cfg(bad))
