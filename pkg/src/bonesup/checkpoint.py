"""Bit-exact binary checkpoints.

Layout (little-endian)::

    magic  "BSGC"            4 bytes
    version u32             = 1
    mode    u8              0 paired, 1 unpaired, 2 classifier
    count   u32             number of entries
    entry * count:
        name_len u16, name (UTF-8)
        rank u8, dims u64 * rank
        payload float32 * prod(dims)

Entry names, in order, for each network role R:

* ``meta.R`` -- architecture: generator ``[depth, base_channels, norm]``,
  discriminator ``[levels, base_channels, conditional, norm]``, classifier
  ``[base_channels]``; norm is 0 for batch, 1 for instance.
* ``R.<param>`` -- every parameter in canonical order.
* ``R.<param>.m``, ``R.<param>.v``, ``R.<param>.t`` -- Adam moments and
  step count (rank 0) for every parameter.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError
from .networks import NORM_MODES, Discriminator, Generator
from .optim import Adam, AdamState

MAGIC = b"BSGC"
VERSION = 1
MODE_TAGS = {"paired": 0, "unpaired": 1, "classifier": 2}
MAX_RANK = 8
_LE_F32 = np.dtype("<f4")


def encode_entries(mode_tag, entries):
    """Serialize ``[(name, ndarray), ...]``."""
    out = [MAGIC, struct.pack("<IBI", VERSION, mode_tag, len(entries))]
    seen = set()
    for name, arr in entries:
        if name in seen:
            raise FormatError(f"duplicate entry name {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim > MAX_RANK:
            raise FormatError(f"{name}: rank {arr.ndim} exceeds {MAX_RANK}")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.astype(_LE_F32).tobytes())
    return b"".join(out)


def decode_entries(buf):
    """Parse a checkpoint buffer into ``(mode_tag, [(name, ndarray), ...])``.

    Any deviation from the layout raises :class:`FormatError` carrying the
    byte offset; nothing is returned for a damaged buffer.
    """
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", offset=pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic", offset=0)
    version, mode_tag, count = struct.unpack("<IBI", take(9, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if mode_tag not in MODE_TAGS.values():
        raise FormatError(f"unknown mode tag {mode_tag}", offset=8)
    entries = []
    names = set()
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not UTF-8", offset=start + 2) from None
        if not name or name in names:
            raise FormatError(f"empty or duplicate entry name {name!r}", offset=start)
        names.add(name)
        rank_at = pos
        (rank,) = struct.unpack("<B", take(1, "rank"))
        if rank > MAX_RANK:
            raise FormatError(f"{name}: rank {rank} exceeds {MAX_RANK}", offset=rank_at)
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims")) if rank else ()
        size = 1
        for d in dims:
            if d == 0:
                raise FormatError(f"{name}: zero dimension", offset=rank_at)
            size *= d
        if size * 4 > len(buf) - pos:
            raise FormatError(f"{name}: truncated payload", offset=pos)
        payload_at = pos
        payload = np.frombuffer(take(size * 4, "payload"), dtype=_LE_F32)
        if not np.isfinite(payload).all():
            raise FormatError(f"{name}: non-finite payload value", offset=payload_at)
        entries.append((name, payload.astype(np.float32).reshape(dims)))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", offset=pos)
    return mode_tag, entries


def _write_atomic(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _net_meta(net):
    norm = float(NORM_MODES.index(net.norm_mode)) if hasattr(net, "norm_mode") else None
    if isinstance(net, Generator):
        return [net.depth, net.base_channels, norm]
    if isinstance(net, Discriminator):
        return [net.levels, net.base_channels, float(net.conditional), norm]
    return [net.base_channels]


def network_entries(role, net, optimizer=None):
    entries = [(f"meta.{role}", np.array(_net_meta(net), dtype=np.float32))]
    entries += [(f"{role}.{name}", p.data) for name, p in net.named_parameters()]
    for name, p in net.named_parameters():
        state = optimizer.state[name] if optimizer is not None else AdamState.zeros_like(p.data)
        entries.append((f"{role}.{name}.m", state.m))
        entries.append((f"{role}.{name}.v", state.v))
        entries.append((f"{role}.{name}.t", np.array(state.t, dtype=np.float32)))
    return entries


def model_entries(model):
    entries = []
    for role, net in model.nets.items():
        entries += network_entries(role, net, model.optimizers.get(role))
    return entries


def save_checkpoint(model, path):
    _write_atomic(path, encode_entries(MODE_TAGS[model.mode], model_entries(model)))


def _meta_int(values, i, name):
    v = float(values[i])
    if v != int(v) or v < 0:
        raise FormatError(f"{name}: bad meta value {v}")
    return int(v)


def restore_network(role, table, build):
    """Rebuild one network (and its Adam state) from a name -> array table.

    ``build(meta)`` constructs the network from its meta vector; consumed
    entries are removed from ``table``.
    """
    meta_name = f"meta.{role}"
    if meta_name not in table:
        raise FormatError(f"missing entry {meta_name}")
    try:
        net = build(table.pop(meta_name).reshape(-1))
    except (ValueError, IndexError) as exc:  # invalid architecture numbers
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{meta_name}: {exc}") from None
    arrays, states = {}, {}
    for name, p in net.named_parameters():
        keys = [f"{role}.{name}{suffix}" for suffix in ("", ".m", ".v", ".t")]
        for key in keys:
            if key not in table:
                raise FormatError(f"missing entry {key}")
        value, m, v, t = (table.pop(k) for k in keys)
        for key, arr in zip(keys[:3], (value, m, v)):
            if arr.shape != p.shape:
                raise FormatError(f"{key}: shape {arr.shape} != {p.shape}")
        if t.shape != () or float(t) != int(float(t)) or float(t) < 0:
            raise FormatError(f"{keys[3]}: step count must be a non-negative integer scalar")
        arrays[name] = value
        states[name] = AdamState(m.copy(), v.copy(), int(float(t)))
    net.load_arrays(arrays)
    return net, states


def _build_generator(meta):
    if meta.size != 3:
        raise FormatError("generator meta needs 3 values")
    depth, base, norm = (_meta_int(meta, i, "generator") for i in range(3))
    return Generator(depth, base, NORM_MODES[norm], seed=0)


def _build_discriminator(meta):
    if meta.size != 4:
        raise FormatError("discriminator meta needs 4 values")
    levels, base, cond, norm = (_meta_int(meta, i, "discriminator") for i in range(4))
    return Discriminator(levels, base, bool(cond), seed=0, norm_mode=NORM_MODES[norm])


def load_checkpoint(path):
    """Load a translation model; raises :class:`FormatError` on any defect."""
    from .training import ROLES, TranslationModel

    with open(path, "rb") as fh:
        buf = fh.read()
    mode_tag, entries = decode_entries(buf)
    modes = {v: k for k, v in MODE_TAGS.items()}
    mode = modes[mode_tag]
    if mode not in ROLES:
        raise FormatError(f"checkpoint holds a {mode}, not a translation model", offset=8)
    table = dict(entries)
    nets, optimizers = {}, {}
    for role in ROLES[mode]:
        build = _build_generator if role.startswith("G") else _build_discriminator
        net, states = restore_network(role, table, build)
        nets[role] = net
        optimizers[role] = Adam(net.named_parameters(), state=states)
    if table:
        raise FormatError(f"unexpected entries: {sorted(table)[:5]}")
    if mode == "paired" and not nets["D"].conditional:
        raise FormatError("paired model needs a conditional discriminator")
    if mode == "unpaired" and any(n.conditional for r, n in nets.items() if r.startswith("D")):
        raise FormatError("unpaired model needs unconditional discriminators")
    return TranslationModel(mode, nets, optimizers)
