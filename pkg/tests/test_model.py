import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtlnet import model as M
from mtlnet import tensor as T
from mtlnet.model import ModelSpec, SpecError
from mtlnet.tensor import Tensor


def _x(spec, n=1, seed=0, dtype=np.float32):
    h, w = spec.input_size
    r = np.random.Generator(np.random.PCG64(seed))
    return Tensor(r.standard_normal((n, 3, h, w)).astype(dtype))


# --------------------------------------------------------------------------
# spec validation


@pytest.mark.parametrize("kw", [
    dict(input_size=(100, 128)),
    dict(width_mult=0.0),
    dict(width_mult=1.5),
    dict(seg_classes=("only",)),
    dict(anchors=()),
    dict(skip_strides=(4,)),
    dict(heads=()),
    dict(anchors=((1.0, -1.0),)),
])
def test_invalid_specs_raise(kw):
    with pytest.raises(SpecError):
        ModelSpec(**kw)


def test_spec_json_round_trip():
    spec = ModelSpec(input_size=(96, 128), width_mult=0.25, skip_strides=(16,), heads=("det",))
    assert ModelSpec.from_json(spec.to_json()) == spec
    with pytest.raises(SpecError):
        ModelSpec.from_json({**spec.to_json(), "bogus": 1})


# --------------------------------------------------------------------------
# build / inventory


def _layer_table_count(spec):
    """Parameter count written out by hand from the documented layer table."""
    w = [max(8, math.ceil(b * spec.width_mult)) for b in (64, 128, 256, 512)]
    conv = lambda i, o, k: i * o * k * k  # noqa: E731
    bn = lambda c: 2 * c  # noqa: E731  (gamma, beta)
    n = conv(3, w[0], 7) + bn(w[0])
    cin = w[0]
    for i, c in enumerate(w):
        n += conv(cin, c, 3) + bn(c) + conv(c, c, 3) + bn(c)
        if i > 0:
            n += conv(cin, c, 1) + bn(c)
        cin = c
    cs = len(spec.seg_classes)
    n += sum(conv(ch, cs, 1) + cs for ch in (w[3], w[2], w[1]))
    n += cs * cs * 4 * 4 + cs * cs * 4 * 4 + cs * cs * 16 * 16  # x2, x2, x8 deconvs
    d = max(8, math.ceil(512 * spec.width_mult))
    n += conv(w[3], d, 3) + d
    n += conv(d, spec.det_channels, 1) + spec.det_channels
    return n


@pytest.mark.parametrize("wm", [1.0, 0.5, 0.25])
def test_inventory_matches_layer_table(wm):
    spec = ModelSpec(width_mult=wm)
    params = M.build(spec, 0)
    M.check_inventory(params, spec)
    assert params.num_trainable() == _layer_table_count(spec)


def test_full_width_parameter_count():
    assert M.build(ModelSpec(), 0).num_trainable() == _layer_table_count(ModelSpec())


def test_build_is_deterministic():
    spec = ModelSpec(input_size=(64, 64), width_mult=0.25)
    assert M.checkpoint_bytes(M.build(spec, 7)) == M.checkpoint_bytes(M.build(spec, 7))
    assert M.checkpoint_bytes(M.build(spec, 7)) != M.checkpoint_bytes(M.build(spec, 8))


def test_half_width_channels():
    full, half = M.layer_table(ModelSpec()), M.layer_table(ModelSpec(width_mult=0.5))
    for a, b in zip(full, half):
        assert a.name == b.name
        if a.name.startswith("enc.") and a.kind == "conv":
            assert b.out_ch == max(8, math.ceil(a.out_ch / 2))
            if a.in_ch != 3:
                assert b.in_ch == max(8, math.ceil(a.in_ch / 2))


@given(st.integers(1, 1024), st.floats(0.01, 1.0))
def test_scaled_width_rounds_up_with_floor(base, wm):
    w = M.scaled_width(base, wm)
    assert w >= 8 and w >= base * wm and (w == 8 or w - 1 < base * wm)


def test_channel_floor_is_configurable():
    spec = ModelSpec(input_size=(32, 64), width_mult=1 / 128, channel_floor=4)
    assert spec.widths == (4, 4, 4, 4) and spec.det_width == 4
    assert ModelSpec.from_json(spec.to_json()) == spec
    assert M.build(spec, 0).num_trainable() < M.build(spec.with_(channel_floor=8), 0).num_trainable()
    with pytest.raises(M.SpecError):
        ModelSpec(channel_floor=0)


def test_init_statistics():
    spec = ModelSpec(width_mult=0.5)
    params = M.build(spec, 3)
    w = params["enc.block4.conv2.w"].data
    fan_in = w.shape[1] * 9
    assert abs(w.std() - math.sqrt(2 / fan_in)) / math.sqrt(2 / fan_in) < 0.02
    assert not params["det.conv1.b"].data.any()
    assert np.all(params["enc.stem.bn.gamma"].data == 1)
    assert not params["enc.stem.bn.beta"].data.any()


def test_inventory_detects_orphans_and_absences():
    spec = ModelSpec(input_size=(64, 64), width_mult=0.25)
    params = M.build(spec, 0)
    params.tensors["extra.w"] = Tensor(np.zeros(1))
    with pytest.raises(SpecError):
        M.check_inventory(params, spec)
    params = M.build(spec, 0)
    del params.tensors["det.conv2.b"]
    with pytest.raises(SpecError):
        M.check_inventory(params, spec)


def test_encoder_is_not_duplicated():
    names = M.build(ModelSpec(width_mult=0.25), 0).names()
    assert len(names) == len(set(names))
    assert all(n.split(".")[0] in ("enc", "seg", "det") for n in names)
    stl = set(M.build(ModelSpec(width_mult=0.25, heads=("seg",)), 0).names())
    assert {n for n in names if n.startswith("enc.")} == {n for n in stl if n.startswith("enc.")}


# --------------------------------------------------------------------------
# forward shapes


def test_full_resolution_shapes():
    spec = ModelSpec()
    params = M.build(spec, 0)
    out = M.forward(params, spec, _x(spec))
    assert out.features.f8.shape == (1, 128, 48, 160)
    assert out.features.f16.shape == (1, 256, 24, 80)
    assert out.features.f32.shape == (1, 512, 12, 40)
    assert out.seg.shape == (1, 3, 384, 1280)
    assert out.det.shape == (1, 40, 12, 40)


def test_small_input_f32_shape():
    spec = ModelSpec(input_size=(96, 128))
    feats = M.forward_encoder(M.build(spec, 0), spec, _x(spec))
    assert feats.f32.shape == (1, 512, 3, 4)
    assert feats.f4.shape == (1, 64, 24, 32)


@pytest.mark.parametrize("h,w", [(32, 32), (64, 96), (96, 128), (128, 64)])
@pytest.mark.parametrize("skips", [(8, 16), (16,), (8,), ()])
def test_shape_contract(h, w, skips):
    spec = ModelSpec(input_size=(h, w), width_mult=1 / 16, skip_strides=skips,
                     anchors=((1.0, 1.0),), det_classes=("car", "person", "cyclist"))
    out = M.forward(M.build(spec, 0), spec, _x(spec, n=2))
    assert out.seg.shape == (2, 3, h, w)
    assert out.det.shape == (2, 8, h // 32, w // 32)
    for s in (4, 8, 16, 32):
        f = out.features.at(s)
        assert f.shape[2:] == (h // s, w // s)


def test_forward_is_pure(tiny_spec):
    params = M.build(tiny_spec, 0)
    a = M.forward(params, tiny_spec, _x(tiny_spec, 2))
    b = M.forward(params, tiny_spec, _x(tiny_spec, 2))
    assert a.seg.data.tobytes() == b.seg.data.tobytes()
    assert a.det.data.tobytes() == b.det.data.tobytes()


def test_zero_score_weights_give_uniform_softmax(tiny_spec):
    params = M.build(tiny_spec, 0)
    for n in params.names():
        if n.startswith("seg.score"):
            params[n].data[...] = 0
    seg = M.forward(params, tiny_spec, _x(tiny_spec)).seg
    assert not seg.data.any()
    np.testing.assert_allclose(T.softmax(seg, axis=1).data, 1 / 3, rtol=1e-6)


def test_missing_heads_raise(tiny_spec):
    spec = tiny_spec.with_(heads=("seg",))
    params = M.build(spec, 0)
    feats = M.forward_encoder(params, spec, _x(spec))
    with pytest.raises(SpecError):
        M.forward_det(params, spec, feats)
    out = M.forward(params, spec, _x(spec))
    assert out.det is None and out.seg is not None


def test_wrong_input_size(tiny_spec):
    with pytest.raises(ValueError):
        M.forward(M.build(tiny_spec, 0), tiny_spec, Tensor(np.zeros((1, 3, 32, 32), np.float32)))


def test_train_mode_reports_bn_updates(tiny_spec):
    params = M.build(tiny_spec, 0)
    upd = {}
    M.forward(params, tiny_spec, _x(tiny_spec, 2), mode="train", bn_updates=upd)
    assert "enc.stem.bn" in upd and "enc.block4.proj_bn" in upd
    assert np.all(params["enc.stem.bn.mean"].data == 0)  # params untouched


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, tiny_spec):
    params = M.build(tiny_spec, 5)
    path = tmp_path / "m.mtlw"
    M.save_checkpoint(path, params, tiny_spec)
    back = M.load_checkpoint(path)
    assert back.names() == params.names()
    assert M.load_spec(str(path) + ".spec.json") == tiny_spec
    x = _x(tiny_spec)
    a, b = M.forward(params, tiny_spec, x), M.forward(back, tiny_spec, x)
    assert a.seg.data.tobytes() == b.seg.data.tobytes()
    assert a.det.data.tobytes() == b.det.data.tobytes()


def test_checkpoint_header(tiny_spec):
    params = M.build(tiny_spec, 0)
    raw = M.checkpoint_bytes(params)
    assert raw[:4] == b"MTLW"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == len(params)
    n = int.from_bytes(raw[12:14], "little")
    assert raw[14:14 + n].decode() == params.names()[0]


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        M.read_checkpoint(io.BytesIO(b"NOPE" + bytes(8)))
