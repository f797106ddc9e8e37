import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from bonesup.checkpoint import (
    MAGIC,
    decode_entries,
    encode_entries,
    load_checkpoint,
    model_entries,
    save_checkpoint,
)
from bonesup.classifier import Classifier, load_classifier, save_classifier
from bonesup.errors import FormatError
from bonesup.training import ROLES, TrainConfig, build_model

TINY = dict(image_size=16, depth=2, gen_channels=2, disc_channels=2, disc_levels=2)


def _model(mode="paired", seed=0):
    model = build_model(TrainConfig(mode=mode, seed=seed, **TINY))
    rng = np.random.default_rng(seed)
    for opt in model.optimizers.values():
        for name, p in opt.named_params:
            s = opt.state[name]
            s.m[...] = rng.normal(size=s.m.shape)
            s.v[...] = rng.uniform(size=s.v.shape)
            s.t = 7
    return model


@pytest.fixture(scope="module", params=["paired", "unpaired"])
def saved(request, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / f"{request.param}.bsgc"
    save_checkpoint(_model(request.param), path)
    return path, path.read_bytes()


def _is_complete(model, mode):
    reference = build_model(TrainConfig(mode=mode, **TINY))
    if tuple(model.nets) != ROLES[mode]:
        return False
    for role, net in model.nets.items():
        ref = reference.nets[role]
        if [(n, p.shape) for n, p in net.named_parameters()] != [(n, p.shape) for n, p in ref.named_parameters()]:
            return False
        state = model.optimizers[role].state
        if any(state[n].m.shape != p.shape or state[n].v.shape != p.shape for n, p in net.named_parameters()):
            return False
    return True


def test_round_trip_byte_identical(saved, tmp_path):
    path, data = saved
    model = load_checkpoint(path)
    save_checkpoint(model, tmp_path / "again.bsgc")
    assert (tmp_path / "again.bsgc").read_bytes() == data


def test_round_trip_preserves_every_tensor(tmp_path):
    model = _model("unpaired", seed=3)
    save_checkpoint(model, tmp_path / "m.bsgc")
    loaded = load_checkpoint(tmp_path / "m.bsgc")
    for (n1, a), (n2, b) in zip(model_entries(model), model_entries(loaded)):
        assert n1 == n2 and np.asarray(a, np.float32).tobytes() == np.asarray(b, np.float32).tobytes()
    assert loaded.optimizers["G_ST"].state["enc0.conv.weight"].t == 7


def test_header_layout(saved):
    _, data = saved
    assert data[:4] == MAGIC
    version, mode, count = struct.unpack("<IBI", data[4:13])
    assert version == 1 and mode in (0, 1) and count > 0
    (name_len,) = struct.unpack("<H", data[13:15])
    assert data[15 : 15 + name_len].decode() in ("meta.G", "meta.G_ST")


def test_entry_suffixes(saved):
    _, data = saved
    _, entries = decode_entries(data)
    names = [n for n, _ in entries]
    assert any(n.endswith(".m") for n in names) and any(n.endswith(".t") for n in names)
    t_entries = [a for n, a in entries if n.endswith(".t")]
    assert all(a.shape == () for a in t_entries)


def test_every_truncation_rejected(saved, tmp_path):
    path, data = saved
    cuts = sorted(set(list(range(0, 64)) + list(range(64, len(data), max(1, len(data) // 300)))))
    bad = tmp_path / "t.bsgc"
    for cut in cuts:
        bad.write_bytes(data[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(bad)


def test_trailing_bytes_rejected(saved, tmp_path):
    _, data = saved
    bad = tmp_path / "x.bsgc"
    bad.write_bytes(data + b"\x00")
    with pytest.raises(FormatError):
        load_checkpoint(bad)


@pytest.mark.parametrize("offset,value", [(0, 0x41), (3, 0x00), (4, 2), (7, 1), (8, 9), (9, 0xFF), (12, 0x7F)])
def test_header_corruptions_rejected(saved, tmp_path, offset, value):
    _, data = saved
    buf = bytearray(data)
    if buf[offset] == value:
        value ^= 1
    buf[offset] = value
    bad = tmp_path / "h.bsgc"
    bad.write_bytes(bytes(buf))
    with pytest.raises(FormatError) as info:
        load_checkpoint(bad)
    assert info.value.offset is not None


def _structural_edits(entries):
    """Entry-level corruptions that must always be rejected."""
    yield "drop", entries[:-1]
    yield "drop_meta", entries[1:]
    yield "rename", [("zzz" + entries[3][0], entries[3][1])] + entries[:3] + entries[4:]
    assert entries[1][1].ndim == 4
    yield "reshape", entries[:1] + [(entries[1][0], entries[1][1].reshape(-1))] + entries[2:]
    yield "extra", entries + [("G.extra", np.zeros(2, np.float32))]
    bad_meta = entries[0][1].copy()
    bad_meta[0] = 99.0
    yield "meta", [(entries[0][0], bad_meta)] + entries[1:]
    frac = entries[0][1].copy()
    frac[1] = 2.5
    yield "meta_frac", [(entries[0][0], frac)] + entries[1:]
    t_idx = next(i for i, (n, _) in enumerate(entries) if n.endswith(".t"))
    yield "t_frac", entries[:t_idx] + [(entries[t_idx][0], np.array(1.5, np.float32))] + entries[t_idx + 1:]


def test_structural_corruptions_rejected(saved, tmp_path):
    _, data = saved
    mode, entries = decode_entries(data)
    bad = tmp_path / "s.bsgc"
    for label, edited in _structural_edits(entries):
        bad.write_bytes(encode_entries(mode, edited))
        with pytest.raises(FormatError):
            load_checkpoint(bad)
    # swapped mode tag: paired entries under the unpaired tag
    bad.write_bytes(encode_entries(1 - mode, entries))
    with pytest.raises(FormatError):
        load_checkpoint(bad)


def test_non_finite_payload_rejected(saved, tmp_path):
    _, data = saved
    mode, entries = decode_entries(data)
    arr = entries[5][1].copy()
    arr.reshape(-1)[0] = np.nan
    bad = tmp_path / "n.bsgc"
    bad.write_bytes(encode_entries(mode, entries[:5] + [(entries[5][0], arr)] + entries[6:]))
    with pytest.raises(FormatError):
        load_checkpoint(bad)


def test_duplicate_and_overlong_entries():
    with pytest.raises(FormatError):
        encode_entries(0, [("a", np.zeros(1)), ("a", np.zeros(1))])
    raw = MAGIC + struct.pack("<IBI", 1, 0, 1) + struct.pack("<H", 1) + b"a" + struct.pack("<B", 9)
    with pytest.raises(FormatError):
        decode_entries(raw + b"\x00" * 80)
    raw = MAGIC + struct.pack("<IBI", 1, 0, 1) + struct.pack("<H", 2) + b"\xff\xfe" + b"\x00"
    with pytest.raises(FormatError):
        decode_entries(raw)
    # huge dims must fail on length, not allocate
    raw = MAGIC + struct.pack("<IBI", 1, 0, 1) + struct.pack("<H", 1) + b"a" + struct.pack("<BQ", 1, 2**60)
    with pytest.raises(FormatError):
        decode_entries(raw)


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.data())
def test_random_corruption_fuzz(saved, tmp_path, data):
    path, original = saved
    mode = "paired" if path.stem == "paired" else "unpaired"
    buf = bytearray(original)
    n_edits = data.draw(st.integers(1, 4))
    for _ in range(n_edits):
        kind = data.draw(st.sampled_from(["flip", "set", "insert", "delete"]))
        pos = data.draw(st.integers(0, len(buf) - 1))
        if kind == "flip":
            buf[pos] ^= 1 << data.draw(st.integers(0, 7))
        elif kind == "set":
            buf[pos] = data.draw(st.integers(0, 255))
        elif kind == "insert":
            buf.insert(pos, data.draw(st.integers(0, 255)))
        else:
            del buf[pos]
    bad = tmp_path / "f.bsgc"
    bad.write_bytes(bytes(buf))
    try:
        model = load_checkpoint(bad)
    except FormatError:
        return
    # the only acceptable alternative is a complete, well-formed model
    assert _is_complete(model, mode)


def test_classifier_checkpoint(tmp_path):
    clf = Classifier(4, seed=1)
    save_classifier(clf, tmp_path / "c.bsgc")
    back = load_classifier(tmp_path / "c.bsgc")
    imgs = np.random.default_rng(0).uniform(size=(3, 16, 16)).astype(np.float32)
    assert clf.scores(imgs).tobytes() == back.scores(imgs).tobytes()
    save_classifier(back, tmp_path / "d.bsgc")
    assert (tmp_path / "c.bsgc").read_bytes() == (tmp_path / "d.bsgc").read_bytes()
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "c.bsgc")
    save_checkpoint(_model(), tmp_path / "m.bsgc")
    with pytest.raises(FormatError):
        load_classifier(tmp_path / "m.bsgc")
