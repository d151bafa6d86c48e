import json
import struct

import numpy as np
import pytest

from gridpost import bundle as bnd
from gridpost.errors import BundleError, DataIOError, FormatError
from gridpost.pca import pca_encode, pca_fit
from gridpost.postproc import DrnConfig, DrnModel, EmosParams, FeatureLayout, FeatureMatrix, emos_predict
from gridpost.postproc.drn import drn_predict_aggregate


def _raw(kind="pca", arrays=None, meta=None):
    return bnd.to_bytes(bnd.Bundle(kind, meta or {"k": 1}, arrays or {"x": np.arange(3.0)}, "2020-01-01T00:00:00+00:00"))


def test_container_layout():
    buf = _raw(arrays={"x": np.arange(3.0), "i": np.array([1, 2], dtype=np.int32)})
    assert buf[:4] == b"MBD1"
    (hlen,) = struct.unpack("<I", buf[4:8])
    header = json.loads(buf[8:8 + hlen])
    assert header["kind"] == "pca" and header["format_version"] == 1
    assert [a["name"] for a in header["arrays"]] == ["i", "x"]
    assert len(buf) == 8 + hlen + 8 + 24


@pytest.mark.parametrize("dtype", ["<f4", "<f8", "<i8", "|u1", "|b1"])
def test_array_roundtrip(dtype):
    arr = (np.arange(12).reshape(3, 4) % 2).astype(dtype)
    back = bnd.from_bytes(_raw(arrays={"a": arr}))
    assert back.arrays["a"].dtype == arr.dtype
    assert np.array_equal(back.arrays["a"], arr)


def test_big_endian_input_stored_little_endian():
    arr = np.arange(4, dtype=">f8")
    back = bnd.from_bytes(_raw(arrays={"a": arr})).arrays["a"]
    assert back.dtype.str == "<f8" and np.array_equal(back, arr)


def test_timestamp_pinned(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    a = bnd.to_bytes(bnd.Bundle("emos", {}, {}))
    assert bnd.from_bytes(a).created == "1970-01-01T00:00:00+00:00"
    assert a == bnd.to_bytes(bnd.Bundle("emos", {}, {}))


def test_format_errors():
    buf = _raw()
    with pytest.raises(FormatError) as exc:
        bnd.from_bytes(b"XXXX" + buf[4:])
    assert exc.value.offset == 0
    with pytest.raises(FormatError, match="truncated"):
        bnd.from_bytes(buf[:6])
    with pytest.raises(FormatError, match="truncated"):
        bnd.from_bytes(buf[:-1])
    with pytest.raises(FormatError, match="trailing"):
        bnd.from_bytes(buf + b"\0")
    with pytest.raises(FormatError, match="exceeds"):
        bnd.from_bytes(buf[:4] + struct.pack("<I", 10**6) + buf[8:])


def test_kind_checks(tmp_path):
    with pytest.raises(BundleError, match="expected a 'drn'"):
        bnd.from_bytes(_raw("pca"), kind="drn")
    with pytest.raises(BundleError):
        bnd.to_bytes(bnd.Bundle("mystery", {}, {}))
    with pytest.raises(BundleError):
        bnd.to_bytes(bnd.Bundle("pca", {}, {"s": np.array(["a"])}))
    with pytest.raises(DataIOError, match="nope.mbd"):
        bnd.load_bundle(tmp_path / "nope.mbd")


def test_save_load(tmp_path):
    b = bnd.Bundle("pca", {"variable": "t2m"}, {"x": np.ones(2)})
    bnd.save_bundle(tmp_path / "m.mbd", b)
    back = bnd.load_bundle(tmp_path / "m.mbd", kind="pca")
    assert back.meta == {"variable": "t2m"} and back.created


def test_pca_roundtrip(rng):
    x = rng.random((20, 4, 5))
    m = pca_fit(x, 3)
    back = bnd.encoder_from_bundle(bnd.from_bytes(bnd.to_bytes(bnd.encoder_to_bundle(m, "z500"))))
    assert back.field_shape == (4, 5)
    assert np.array_equal(pca_encode(back, x), pca_encode(m, x))


def test_emos_roundtrip(rng):
    p = EmosParams(rng.normal(size=3), rng.normal(size=3), rng.normal(size=3), rng.normal(size=3), ["A", "B", "C"])
    back = bnd.emos_from_bundle(bnd.from_bytes(bnd.to_bytes(bnd.emos_to_bundle(p, "t2m"))))
    mean, sd = rng.normal(size=(5, 3)), rng.random((5, 3))
    f, g = emos_predict(p, mean, sd), emos_predict(back, mean, sd)
    assert np.array_equal(f.mu, g.mu) and np.array_equal(f.sigma, g.sigma)
    assert back.station_ids == ["A", "B", "C"]


def _drn_models(n=2):
    layout = FeatureLayout(["x0", "x1"], [], station_ids=["A", "B"], mean=np.zeros(2), sd=np.ones(2))
    cfg = DrnConfig(hidden=(8,), embedding_dim=3, repetitions=n)
    return [DrnModel(cfg, layout, 1.5, 2.0, k) for k in range(n)]


def test_drn_roundtrip_identical_predictions(rng):
    models = _drn_models()
    enc = bnd.pca_to_bundle(pca_fit(rng.random((10, 6)), 2), "t2m")
    b = bnd.from_bytes(bnd.to_bytes(bnd.drn_to_bundle(models, "t2m", {"t2m": enc})), kind="drn")
    back, encoders = bnd.drn_from_bundle(b)
    assert list(encoders) == ["t2m"] and encoders["t2m"].kind == "pca"
    assert [m.repetition for m in back] == [0, 1]
    fm = FeatureMatrix(rng.normal(size=(7, 2)), rng.integers(0, 2, 7), np.zeros(7), np.arange(7), np.zeros(7, int))
    f, g = drn_predict_aggregate(models, fm), drn_predict_aggregate(back, fm)
    assert np.array_equal(f.mu, g.mu) and np.array_equal(f.sigma, g.sigma)
    assert b.meta["deviations"] and b.meta["y_sd"] == 2.0


def test_drn_bundle_missing_arrays_rejected():
    b = bnd.drn_to_bundle(_drn_models(1), "t2m")
    del b.arrays["rep000.p001"]
    with pytest.raises(BundleError, match="repetition 0"):
        bnd.drn_from_bundle(b)


def test_encoder_kind_checked():
    with pytest.raises(BundleError):
        bnd.encoder_from_bundle(bnd.Bundle("emos", {}, {}))
