"""Binary checkpoint format.

Layout (little-endian)::

    magic      8 bytes  b"RESFRICK"
    version    u32
    hdr_len    u64
    header     hdr_len bytes of UTF-8 JSON
    payload    raw array bytes; header["arrays"] gives name/dtype/shape/offset/nbytes
               with offsets relative to the payload start

Array names are prefixed ``param/``, ``buffer/``, ``mask/`` or ``velocity/``.
"""

import json
import os
import struct

import numpy as np

from .errors import FormatError
from .network import CONFIG_VERSION, Network, NetworkConfig
from .optim import SGD
from .pruning import PruningMask

MAGIC = b"RESFRICK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _collect(net, optimizer):
    arrays = {}
    for name, p in net.named_parameters():
        arrays[f"param/{name}"] = p.data
    for name, b in net.named_buffers():
        arrays[f"buffer/{name}"] = b
    for name, m in net.named_masks().items():
        arrays[f"mask/{name}"] = m.mask
    if optimizer is not None:
        for name, v in optimizer.state_arrays().items():
            arrays[f"velocity/{name}"] = v
    return arrays


def save_checkpoint(net, optimizer, path, epoch=0, state=None):
    """Write ``net`` (and optionally optimizer velocities) to ``path`` atomically.

    ``state`` is an arbitrary JSON-serialisable dict (scheduler, history, rng).
    """
    arrays = _collect(net, optimizer)
    entries, offset = [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "config_version": CONFIG_VERSION,
        "config": net.cfg.to_dict(),
        "seed": net.seed,
        "dtype": net.dtype.str,
        "epoch": int(epoch),
        "optimizer": None if optimizer is None else {
            "lr": optimizer.lr, "momentum": optimizer.momentum,
            "weight_decay": optimizer.weight_decay},
        "mask_ratios": {name: m.ratio for name, m in net.named_masks().items()},
        "state": state or {},
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        f.write(blob)
        for name, arr in arrays.items():
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Parse ``path`` into ``(header, {name: array})`` without building anything."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _PREFIX.size:
        raise FormatError("checkpoint truncated inside the fixed prefix", offset=len(buf))
    magic, version, hdr_len = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(
            f"unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})",
            offset=8,
        )
    start = _PREFIX.size
    if len(buf) < start + hdr_len:
        raise FormatError("checkpoint header truncated", offset=len(buf))
    try:
        header = json.loads(buf[start:start + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}", offset=start) from None
    payload = start + hdr_len
    arrays = {}
    for e in header["arrays"]:
        begin = payload + e["offset"]
        end = begin + e["nbytes"]
        if end > len(buf):
            raise FormatError(f"array {e['name']} truncated", offset=len(buf))
        dt = np.dtype(e["dtype"])
        arrays[e["name"]] = np.frombuffer(buf, dtype=dt, count=e["nbytes"] // dt.itemsize,
                                          offset=begin).reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path):
    """Rebuild ``(net, optimizer, header)`` from ``path``.

    The optimizer is None if the checkpoint holds no optimizer state.
    """
    header, arrays = read_checkpoint(path)
    cfg = NetworkConfig.from_dict(header["config"])
    net = Network(cfg, seed=header["seed"], dtype=np.dtype(header["dtype"]))
    for name, p in net.named_parameters():
        _assign(p.data, arrays, f"param/{name}")
    for name, b in net.named_buffers():
        _assign(b, arrays, f"buffer/{name}")
    params = dict(net.named_parameters())
    layers = {id(layer.weight): layer for layer in net.modules() if hasattr(layer, "mask")}
    for name, ratio in header["mask_ratios"].items():
        layer = layers[id(params[name])]
        layer.mask = PruningMask(arrays[f"mask/{name}"], ratio)
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = SGD(net, **header["optimizer"])
        optimizer.load_state_arrays(
            {n[len("velocity/"):]: a for n, a in arrays.items() if n.startswith("velocity/")}
        )
    return net, optimizer, header


def _assign(target, arrays, key):
    if key not in arrays:
        raise FormatError(f"checkpoint is missing array {key}")
    src = arrays[key]
    if src.shape != target.shape:
        raise FormatError(f"array {key} has shape {src.shape}, expected {target.shape}")
    target[...] = src
