"""
Named-array container files (weights, stacked tensors, adapters, masks).

Layout::

    magic       8 bytes  b"TSPT0001"
    header_len  u64 little-endian
    header      UTF-8 JSON, header_len bytes:
                {"arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...],
                 "meta": {...}}
    payload     raw little-endian row-major arrays; offsets are relative to
                the payload start and every array starts on a 64-byte boundary

Checkpoints name their matrices ``layer.{l}.{q|k|v|o|up|down}`` (l from 1).
Adapter files hold ``{w_sa|w_up|w_down}.{U|S_tubes|V|residual}``; tensors are
stored as their (n3, n1, n2) frontal-slice stacks and ``S_tubes`` as (r, n3).
Opaque per-layer arrays (biases) keep their ``layer.{l}.{name}`` names in
every kind of file.
"""

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .adapters import (
    METHOD_LORA_PT,
    ROLES,
    STACK_NAMES,
    STACK_ORDERS,
    EncoderWeights,
    LayerWeights,
    LoRAPTAdapter,
    StackedTensors,
    TensorSplit,
    layer_extras,
    role_shape,
    split_layer_name,
)
from .exceptions import ContainerError, InvalidArgumentError, NumericError
from .segmetrics import Mask3D
from .tensor3 import Tensor3
from .tsvd import LowRankFactors

logger = logging.getLogger(__name__)

MAGIC = b'TSPT0001'
ALIGNMENT = 64
DTYPES = {
    'f32': np.dtype('<f4'),
    'f64': np.dtype('<f8'),
    'u8': np.dtype('u1'),
}
ADAPTER_META_KEYS = ('rank', 'd', 'layers', 'stack_order', 'method')


@dataclass
class Container:
    arrays: dict
    meta: dict = field(default_factory=dict)
    entries: list = field(default_factory=list)


def _to_numpy(array):
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    return np.asarray(array)


def _align(offset):
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def _storage_tag(array, storage_dtype):
    if array.dtype == np.uint8 or array.dtype == bool:
        return 'u8'
    return storage_dtype


def write_container(path, arrays, meta=None, storage_dtype='f32'):
    """Write ``arrays`` (name -> array) and ``meta`` to ``path``."""
    if storage_dtype not in ('f32', 'f64'):
        raise InvalidArgumentError(f"storage dtype must be f32 or f64, got {storage_dtype}")
    entries = []
    blobs = []
    offset = 0
    for name, array in arrays.items():
        data = _to_numpy(array)
        tag = _storage_tag(data, storage_dtype)
        raw = np.ascontiguousarray(data.astype(DTYPES[tag], copy=False)).tobytes()
        offset = _align(offset)
        entries.append({
            'name': name,
            'dtype': tag,
            'shape': [int(s) for s in data.shape],
            'offset': offset,
            'nbytes': len(raw),
        })
        blobs.append((offset, raw))
        offset += len(raw)
    header = json.dumps({'arrays': entries, 'meta': meta or {}}).encode('utf-8')
    payload = bytearray(offset)
    for start, raw in blobs:
        payload[start:start + len(raw)] = raw
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(struct.pack('<Q', len(header)))
        f.write(header)
        f.write(payload)
    logger.info(f"wrote {path}: {len(entries)} arrays, {len(payload)} payload bytes")
    return entries


def validate_header(header, payload_len):
    """Raise ContainerError unless every header invariant holds."""
    if not isinstance(header, dict) or 'arrays' not in header:
        raise ContainerError("header is missing the 'arrays' list")
    entries = header['arrays']
    if not isinstance(entries, list):
        raise ContainerError("'arrays' must be a list")
    if not isinstance(header.get('meta', {}), dict):
        raise ContainerError("'meta' must be an object")
    names = set()
    previous_end = 0
    previous_offset = 0
    for entry in entries:
        try:
            name = entry['name']
            tag = entry['dtype']
            shape = entry['shape']
            offset = entry['offset']
            nbytes = entry['nbytes']
        except (KeyError, TypeError) as exc:
            raise ContainerError(f"array entry {entry!r} lacks a field: {exc}") from exc
        if name in names:
            raise ContainerError(f"duplicate array name: {name}")
        names.add(name)
        if tag not in DTYPES:
            raise ContainerError(f"{name}: unknown dtype {tag}")
        if not isinstance(shape, list) or any(not isinstance(s, int) or s < 0 for s in shape):
            raise ContainerError(f"{name}: invalid shape {shape}")
        expected = DTYPES[tag].itemsize * int(np.prod(shape, dtype=np.int64))
        if nbytes != expected:
            raise ContainerError(f"{name}: nbytes {nbytes} != {expected}")
        if offset % ALIGNMENT:
            raise ContainerError(f"{name}: offset {offset} is not {ALIGNMENT}-byte aligned")
        if offset < previous_offset or offset < previous_end:
            raise ContainerError(f"{name}: offset {offset} overlaps the previous array")
        if offset + nbytes > payload_len:
            raise ContainerError(f"{name}: extends past the payload end")
        previous_offset = offset
        previous_end = offset + nbytes


def read_header(raw):
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise ContainerError("not a TSPT0001 container (bad magic)")
    (header_len,) = struct.unpack('<Q', raw[8:16])
    if 16 + header_len > len(raw):
        raise ContainerError(f"header length {header_len} runs past end of file")
    try:
        header = json.loads(raw[16:16 + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"header is not valid UTF-8 JSON: {exc}") from exc
    payload = raw[16 + header_len:]
    validate_header(header, len(payload))
    return header, payload


def read_container(path):
    """Parse and validate a container; arrays come back in their stored dtype."""
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from exc
    header, payload = read_header(raw)
    arrays = {}
    for entry in header['arrays']:
        dtype = DTYPES[entry['dtype']]
        count = int(np.prod(entry['shape'], dtype=np.int64))
        data = np.frombuffer(payload, dtype=dtype, count=count, offset=entry['offset'])
        arrays[entry['name']] = data.reshape(entry['shape']).copy()
    logger.debug(f"read {path}: {len(arrays)} arrays")
    return Container(arrays=arrays, meta=header.get('meta', {}), entries=header['arrays'])


def _tensor(array):
    return torch.from_numpy(np.asarray(array, dtype=np.float64))


def _require(container, name, shape=None):
    if name not in container.arrays:
        raise ContainerError(f"missing array: {name}")
    array = container.arrays[name]
    if shape is not None and tuple(array.shape) != tuple(shape):
        raise ContainerError(f"{name}: shape {tuple(array.shape)}, expected {tuple(shape)}")
    return array


def save_checkpoint(path, weights, storage_dtype='f32', meta=None):
    arrays = dict(weights.named_matrices())
    arrays.update(layer_extras(weights))
    info = {'kind': 'checkpoint', 'd': weights.d, 'layers': weights.L}
    info.update(meta or {})
    return write_container(path, arrays, info, storage_dtype)


def checkpoint_from_container(container):
    """EncoderWeights from a checkpoint container (``layer.{l}.{role}`` names)."""
    layer_ids = {parsed[0] for parsed in map(split_layer_name, container.arrays) if parsed}
    if not layer_ids:
        raise ContainerError("no 'layer.{l}.{role}' arrays found")
    L = max(layer_ids)
    if sorted(layer_ids) != list(range(1, L + 1)):
        raise ContainerError(f"layer numbers are not contiguous from 1: {sorted(layer_ids)}")
    q = _require(container, 'layer.1.q')
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ContainerError(f"layer.1.q must be square, got {q.shape}")
    d = q.shape[0]
    layers = []
    for index in range(1, L + 1):
        matrices = {
            role: _tensor(_require(container, f"layer.{index}.{role}", role_shape(role, d)))
            for role in ROLES
        }
        extras = {
            name.split('.', 2)[2]: _tensor(array)
            for name, array in container.arrays.items()
            if name.startswith(f"layer.{index}.") and name.split('.', 2)[2] not in ROLES
        }
        layers.append(LayerWeights(extras=extras, **matrices))
    try:
        return EncoderWeights(d=d, layers=layers)
    except InvalidArgumentError as exc:
        raise ContainerError(str(exc)) from exc


def load_checkpoint(path):
    return checkpoint_from_container(read_container(path))


def _extras(container, L):
    """Opaque ``layer.{l}.{name}`` arrays of a stacked or adapter container."""
    extras = {}
    for name, array in container.arrays.items():
        parsed = split_layer_name(name)
        if parsed is None:
            continue
        if not 1 <= parsed[0] <= L or parsed[1] in ROLES:
            raise ContainerError(f"opaque array {name} does not belong to a layer 1..{L}")
        extras[name] = _tensor(array)
    return extras


def save_stacked(path, stacked, storage_dtype='f32'):
    arrays = {name: tensor.slices for name, tensor in stacked.named().items()}
    arrays.update(stacked.extras)
    meta = {'kind': 'stacked', 'stack_order': stacked.stack_order}
    return write_container(path, arrays, meta, storage_dtype)


def load_stacked(path):
    container = read_container(path)
    order = container.meta.get('stack_order')
    if order not in STACK_ORDERS:
        raise ContainerError(f"unknown or missing stack_order: {order!r}")
    try:
        tensors = {name: Tensor3(_tensor(_require(container, name))) for name in STACK_NAMES}
    except (InvalidArgumentError, NumericError) as exc:
        raise ContainerError(f"invalid stacked tensor: {exc}") from exc
    extras = _extras(container, tensors['w_up'].n3)
    return StackedTensors(stack_order=order, extras=extras, **tensors)


def save_adapter(path, adapter, storage_dtype='f32', meta=None):
    arrays = {}
    for name, split in adapter.splits().items():
        arrays[f"{name}.U"] = split.principal.U.slices
        arrays[f"{name}.S_tubes"] = split.principal.s_tubes
        arrays[f"{name}.V"] = split.principal.V.slices
        arrays[f"{name}.residual"] = split.residual.slices
    arrays.update(adapter.extras)
    info = {
        'kind': 'adapter',
        'method': METHOD_LORA_PT,
        'rank': adapter.rank,
        'd': adapter.d,
        'layers': adapter.layers,
        'stack_order': adapter.stack_order,
        'tensor_layout': 'frontal-slices',
    }
    info.update(meta or {})
    return write_container(path, arrays, info, storage_dtype)


def adapter_from_container(container):
    """LoRAPTAdapter from an adapter container; schema violations raise ContainerError."""
    meta = container.meta
    missing = [key for key in ADAPTER_META_KEYS if key not in meta]
    if missing:
        raise ContainerError(f"adapter meta lacks {', '.join(missing)}")
    if meta['method'] != METHOD_LORA_PT:
        raise ContainerError(f"unsupported adapter method: {meta['method']}")
    if meta['stack_order'] not in STACK_ORDERS:
        raise ContainerError(f"unknown stack_order: {meta['stack_order']}")
    try:
        r, d, L = (_meta_int(meta, key) for key in ('rank', 'd', 'layers'))
    except (TypeError, ValueError) as exc:
        raise ContainerError(f"adapter meta is not integral: {exc}") from exc
    depths = {'w_sa': (d, d, 4 * L), 'w_up': (d, 4 * d, L), 'w_down': (4 * d, d, L)}
    splits = {}
    for name, (n1, n2, n3) in depths.items():
        U = _require(container, f"{name}.U", (n3, n1, r))
        tubes = _require(container, f"{name}.S_tubes", (r, n3))
        V = _require(container, f"{name}.V", (n3, n2, r))
        residual = _require(container, f"{name}.residual", (n3, n1, n2))
        try:
            principal = LowRankFactors.from_tubes(Tensor3(_tensor(U)), _tensor(tubes), Tensor3(_tensor(V)))
            splits[name] = TensorSplit(principal=principal, residual=Tensor3(_tensor(residual)))
        except (InvalidArgumentError, NumericError) as exc:
            raise ContainerError(f"{name}: {exc}") from exc
    return LoRAPTAdapter(
        rank=r, d=d, layers=L, stack_order=meta['stack_order'], extras=_extras(container, L), **splits
    )


def _meta_int(meta, key):
    value = meta[key]
    if isinstance(value, bool) or int(value) != value:
        raise ValueError(f"{key}={value!r}")
    return int(value)


def load_adapter(path):
    return adapter_from_container(read_container(path))


def save_mask(path, mask):
    """Masks are stored as f32 zeros and ones."""
    meta = {'kind': 'mask', 'spacing': list(mask.spacing)}
    return write_container(path, {'mask': mask.voxels.astype(np.float32)}, meta, storage_dtype='f32')


def load_mask(path):
    container = read_container(path)
    if 'mask' in container.arrays:
        voxels = container.arrays['mask']
    elif len(container.arrays) == 1:
        voxels = next(iter(container.arrays.values()))
    else:
        raise ContainerError("mask container needs a 'mask' array")
    spacing = container.meta.get('spacing', [1.0, 1.0, 1.0])
    try:
        return Mask3D(voxels, tuple(spacing))
    except (TypeError, ValueError) as exc:
        raise ContainerError(f"invalid mask: {exc}") from exc
