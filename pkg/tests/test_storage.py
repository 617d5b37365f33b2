import io
import struct

import numpy as np
import pytest

from vesselgan.exceptions import ContainerFormatError
from vesselgan.imaging import GrayImage, PatchSet, extract_patches
from vesselgan.storage import (
    decode_png16,
    encode_png16,
    load_patchset,
    read_manifest,
    read_patchset,
    save_patchset,
    write_patchset,
    write_preprocessed,
)


def _patches(rng, n=5, labeled=True, size=8):
    img = GrayImage(rng.uniform(0, 1, (30, 30)))
    gt = rng.uniform(0, 1, (30, 30)) > 0.5 if labeled else None
    return extract_patches(img, gt, n, size, rng_seed=2, source_id="img")


def test_vgps_header_layout(rng):
    ps = _patches(rng, 3)
    buf = io.BytesIO()
    write_patchset(buf, ps)
    raw = buf.getvalue()
    magic, version, size, count = struct.unpack("<4sHHI", raw[:12])
    assert (magic, version, size, count) == (b"VGPS", 1, 8, 3)
    assert len(raw) == 12 + 3 * 64 * 4 + 3 * 64
    values = np.frombuffer(raw[12:12 + 3 * 64 * 4], "<f4").reshape(3, 8, 8)
    np.testing.assert_array_equal(values, ps.values)


def test_vgps_unlabeled_sentinel(rng):
    ps = _patches(rng, 2, labeled=False)
    buf = io.BytesIO()
    write_patchset(buf, ps)
    raw = buf.getvalue()
    assert set(raw[-2 * 64:]) == {0xFF}
    back = read_patchset(io.BytesIO(raw))
    assert back.labels is None


def test_vgps_roundtrip_file(tmp_path, rng):
    ps = _patches(rng, 6)
    save_patchset(tmp_path / "p.vgps", ps)
    back = load_patchset(tmp_path / "p.vgps")
    np.testing.assert_array_equal(back.values, ps.values)
    np.testing.assert_array_equal(back.labels, ps.labels)


def test_vgps_empty(rng):
    buf = io.BytesIO()
    write_patchset(buf, PatchSet.empty(48))
    assert len(read_patchset(io.BytesIO(buf.getvalue()))) == 0


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-5], lambda b: b[:6]])
def test_vgps_rejects_corrupt(rng, mutate):
    buf = io.BytesIO()
    write_patchset(buf, _patches(rng, 2))
    with pytest.raises(ContainerFormatError):
        read_patchset(io.BytesIO(mutate(buf.getvalue())))


def test_png16_is_lossless_to_quantum(rng):
    v = rng.uniform(0, 1, (17, 23))
    back = decode_png16(encode_png16(v)).values
    assert np.abs(back - v).max() <= 0.5 / 65535 + 1e-12


def test_preprocessed_manifest(tmp_path, rng):
    recs = [("a", "train", GrayImage(rng.uniform(0, 1, (5, 5)))), ("b", "test", GrayImage(np.zeros((5, 5))))]
    path = write_preprocessed(tmp_path, recs)
    rows = read_manifest(path)
    assert [(r["id"], r["split"]) for r in rows] == [("a", "train"), ("b", "test")]
    import hashlib

    for r in rows:
        assert hashlib.sha256((tmp_path / r["file"]).read_bytes()).hexdigest() == r["checksum"]
