"""Datasets, model files and run configuration."""

import gzip
import math
import struct
import zlib
from dataclasses import dataclass, fields

import numpy as np

from liplocal import network
from liplocal.errors import ContractError, FormatError, ShapeError
from liplocal.trainer import TrainConfig

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
MODEL_MAGIC = b"LLNN"
MODEL_VERSION = 1
_KINDS = ("linear", "conv")
_PARAMS = ("weight", "bias", "theta", "a", "b")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.intp)
        if self.ids is None:
            self.ids = np.arange(len(self.y))
        if len(self.x) != len(self.y):
            raise ShapeError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx], self.ids[idx])

    @property
    def input_shape(self):
        return self.x.shape[1:]


# IDX


def _read_bytes(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError, zlib.error) as e:
            raise FormatError(f"corrupt gzip stream: {e}", 0) from None
    return data


def parse_idx(data):
    """Decode IDX bytes: images (magic 0x803) scaled to [0, 1], labels (0x801) as ints."""
    if len(data) < 8:
        raise FormatError("IDX header truncated", len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic == IDX_IMAGES:
        if len(data) < 16:
            raise FormatError("IDX image header truncated", len(data))
        n, rows, cols = struct.unpack_from(">III", data, 4)
        offset, shape = 16, (n, 1, rows, cols)
    elif magic == IDX_LABELS:
        (n,) = struct.unpack_from(">I", data, 4)
        offset, shape = 8, (n,)
    else:
        raise FormatError(f"bad IDX magic 0x{magic:08x}", 0)
    need = math.prod(shape)
    if len(data) - offset < need:
        raise FormatError(f"IDX payload truncated: need {need} bytes, have {len(data) - offset}", len(data))
    if len(data) - offset > need:
        raise FormatError("trailing bytes after IDX payload", offset + need)
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset).reshape(shape)
    if magic == IDX_IMAGES:
        return raw.astype(np.float64) / 255.0
    return raw.astype(np.intp)


def read_idx(path):
    return parse_idx(_read_bytes(path))


def encode_idx(array, labels=False):
    a = np.asarray(array)
    if labels:
        return struct.pack(">II", IDX_LABELS, len(a)) + a.astype(np.uint8).tobytes()
    if a.dtype != np.uint8:
        a = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    a = a.reshape(len(a), a.shape[-2], a.shape[-1])
    return struct.pack(">IIII", IDX_IMAGES, *a.shape) + a.tobytes()


def write_idx(path, array, labels=False):
    with open(path, "wb") as f:
        f.write(encode_idx(array, labels))


def load_idx(images_path, labels_path, limit=None):
    x, y = read_idx(images_path), read_idx(labels_path)
    if x.ndim != 4 or y.ndim != 1:
        raise FormatError("expected an image file and a label file", 0)
    if len(x) != len(y):
        raise FormatError(f"{len(x)} images but {len(y)} labels", 0)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    return Dataset(x, y)


def load_cifar10_binary(path, limit=None):
    """CIFAR-10 binary batch: records of 1 label byte then 3072 pixel bytes."""
    data = _read_bytes(path)
    rec = 1 + 3 * 32 * 32
    if len(data) % rec:
        raise FormatError("CIFAR-10 batch length is not a whole number of records", len(data) - len(data) % rec)
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, rec)
    if limit is not None:
        raw = raw[:limit]
    return Dataset(raw[:, 1:].reshape(-1, 3, 32, 32) / 255.0, raw[:, 0].astype(np.intp))


# synthetic 2-D data


def synth_dataset(kind, n, seed=0, separation=4.0, noise=0.1):
    if n <= 0:
        raise ContractError("n must be positive")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    rng.shuffle(y)
    if kind == "gaussian_blobs":
        centres = np.array([[-separation / 2, 0.0], [separation / 2, 0.0]])
        x = centres[y] + 0.5 * rng.standard_normal((n, 2))
    elif kind == "two_moons":
        t = rng.uniform(0, math.pi, n)
        x = np.where(
            y[:, None] == 0,
            np.stack([np.cos(t), np.sin(t)], 1),
            np.stack([1 - np.cos(t), 0.5 - np.sin(t)], 1),
        )
        x = x + noise * rng.standard_normal((n, 2))
    else:
        raise ContractError(f"unknown synthetic dataset {kind!r}")
    return Dataset(x, y)


def load_dataset(spec, labels=None, limit=None):
    """Dataset from ``synth:<kind>:<n>[:<seed>]``, ``cifar10:<path>`` or an IDX image path plus labels."""
    if spec.startswith("synth:"):
        parts = spec.split(":")
        if len(parts) not in (3, 4):
            raise ContractError(f"expected synth:<kind>:<n>[:<seed>], got {spec!r}")
        try:
            n, seed = int(parts[2]), int(parts[3]) if len(parts) == 4 else 0
        except ValueError:
            raise ContractError(f"bad sample count or seed in {spec!r}") from None
        data = synth_dataset(parts[1], n, seed)
        return data.subset(np.arange(min(limit, len(data)))) if limit else data
    if spec.startswith("cifar10:"):
        return load_cifar10_binary(spec[len("cifar10:"):], limit)
    if labels is None:
        raise ContractError("an IDX image file needs a matching label file")
    return load_idx(spec, labels, limit)


# model files


def _pack_array(tag, arr):
    arr = np.asarray(arr)
    head = struct.pack("<BI", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4").tobytes()


def encode_model(net):
    out = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION)]
    shape = tuple(net.input_shape)
    out.append(struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
    arch = network.render(net).encode()
    out.append(struct.pack("<I", len(arch)) + arch)
    out.append(struct.pack("<fI", float(net.eps_trained), len(net.layers)))
    for layer in net.layers:
        names = layer.param_names()
        out.append(struct.pack("<BBIIB", _KINDS.index(layer.kind), network.ACTIVATIONS.index(layer.activation),
                               layer.stride, layer.padding, len(names)))
        out.extend(_pack_array(_PARAMS.index(k), getattr(layer, k)) for k in names)
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(path, net):
    with open(path, "wb") as f:
        f.write(encode_model(net))


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError(f"unexpected end of file reading {fmt}", self.pos)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def floats(self, count):
        if count < 0 or self.pos + 4 * count > len(self.data):
            raise FormatError(f"array of {count} floats overruns the file", self.pos)
        with np.errstate(invalid="ignore"):
            arr = np.frombuffer(self.data, dtype="<f4", count=count, offset=self.pos).astype(np.float64)
        self.pos += 4 * count
        return arr


def decode_model(data):
    """Parse model bytes; every malformation raises :class:`FormatError`."""
    if len(data) < 12:
        raise FormatError("model file too short", len(data))
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    (version,) = struct.unpack_from("<I", data, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}", 4)
    body, (crc,) = data[:-4], struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch", len(data) - 4)
    r = _Reader(body)
    r.pos = 8
    (ndim,) = r.take("<I")
    if not 1 <= ndim <= 3:
        raise FormatError(f"input rank {ndim} unsupported", r.pos - 4)
    shape = r.take(f"<{ndim}I")
    (alen,) = r.take("<I")
    if r.pos + alen > len(body):
        raise FormatError("architecture string overruns the file", r.pos)
    try:
        arch = body[r.pos : r.pos + alen].decode()
    except UnicodeDecodeError:
        raise FormatError("architecture string is not UTF-8", r.pos) from None
    r.pos += alen
    eps, n_layers = r.take("<fI")
    if n_layers < 1 or n_layers > 4096:
        raise FormatError(f"implausible layer count {n_layers}", r.pos - 4)
    layers, cur = [], tuple(shape)
    for li in range(n_layers):
        start = r.pos
        kind, act, stride, padding, n_arr = r.take("<BBIIB")
        if kind >= len(_KINDS) or act >= len(network.ACTIVATIONS):
            raise FormatError(f"layer {li}: unknown kind/activation tag", start)
        params = {}
        for _ in range(n_arr):
            tag, adim = r.take("<BI")
            if tag >= len(_PARAMS) or adim > 4:
                raise FormatError(f"layer {li}: bad array header", r.pos - 5)
            dims = r.take(f"<{adim}I")
            count = math.prod(dims)
            params[_PARAMS[tag]] = r.floats(count).reshape(dims)
        try:
            layer = _build_layer(_KINDS[kind], network.ACTIVATIONS[act], stride, padding, params, cur)
        except (ShapeError, ContractError, KeyError, ValueError) as e:
            raise FormatError(f"layer {li}: {e}", start) from None
        layers.append(layer)
        cur = layer.out_shape
    if r.pos != len(body):
        raise FormatError("trailing bytes after last layer", r.pos)
    net = network.NetworkSpec(tuple(shape), layers, name=arch, eps_trained=float(eps))
    try:
        net.validate()
        if network.render(net) != arch:
            raise ContractError(f"architecture string {arch!r} disagrees with the stored layers")
    except (ShapeError, ContractError) as e:
        raise FormatError(str(e), 0) from None
    return net


def _build_layer(kind, act, stride, padding, params, in_shape):
    w, b = params["weight"], params["bias"]
    if kind == "linear":
        if w.ndim != 2 or b.shape != (w.shape[0],) or w.shape[1] != math.prod(in_shape):
            raise ShapeError("linear weight/bias shapes do not fit")
        layer = network.LayerSpec("linear", w, b, (w.shape[1],), (w.shape[0],), act)
    else:
        if w.ndim != 4 or len(in_shape) != 3 or w.shape[1] != in_shape[0] or b.shape != (w.shape[0],):
            raise ShapeError("conv weight/bias shapes do not fit")
        if stride < 1 or w.shape[2] != w.shape[3] or w.shape[2] < 1:
            raise ShapeError("bad conv geometry")
        oh = (in_shape[1] + 2 * padding - w.shape[2]) // stride + 1
        ow = (in_shape[2] + 2 * padding - w.shape[2]) // stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError("conv output underflows")
        layer = network.LayerSpec("conv", w, b, tuple(in_shape), (w.shape[0], oh, ow), act, stride, padding)
    if set(params) != set(layer.param_names()):
        raise ShapeError(f"parameters {sorted(params)} do not match activation {act}")
    for k in ("theta", "a", "b"):
        if k in params:
            setattr(layer, k, params[k])
    if act == "relu_theta" and layer.theta.shape != tuple(layer.out_shape):
        raise ShapeError("theta shape mismatch")
    if act == "clipped_maxmin":
        half = (layer.out_shape[0] // 2,) + tuple(layer.out_shape[1:])
        if layer.a.shape != half or layer.b.shape != half:
            raise ShapeError("clipped maxmin threshold shape mismatch")
    if not all(np.all(np.isfinite(v)) for v in params.values()):
        raise ShapeError("non-finite parameters")
    layer.validate()
    return layer


def load_model(path):
    with open(path, "rb") as f:
        return decode_model(f.read())


# run configuration

RUN_KEYS = ("arch", "activation", "data", "labels", "n_samples", "model_out", "metrics_out", "cache_out")
REQUIRED_KEYS = ("arch", "data", "model_out", "eps_target", "epochs")


def _field_types():
    types = {f.name: f.type for f in fields(TrainConfig)}
    types.update({"arch": str, "activation": str, "data": str, "labels": str, "n_samples": int,
                  "model_out": str, "metrics_out": str, "cache_out": str})
    return types


def _coerce(key, raw, typ, line_no):
    name = typ if isinstance(typ, str) else typ.__name__
    try:
        if name == "int":
            return int(raw)
        if name == "float":
            return float(raw)
        return raw
    except ValueError:
        raise FormatError(f"line {line_no}: {key} expects {name}, got {raw!r}") from None


def parse_run_config(text):
    """Parse ``key = value`` lines; ``#`` starts a comment. Returns a dict."""
    types = _field_types()
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {no}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise FormatError(f"line {no}: unknown key {key!r}")
        if key in out:
            raise FormatError(f"line {no}: duplicate key {key!r}")
        out[key] = _coerce(key, raw, types[key], no)
    missing = [k for k in REQUIRED_KEYS if k not in out]
    if missing:
        raise FormatError(f"missing required keys: {', '.join(missing)}")
    return out


def render_run_config(cfg):
    order = list(RUN_KEYS) + TrainConfig.keys()
    lines = []
    for k in order:
        if k in cfg and cfg[k] is not None:
            v = cfg[k]
            lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
    return "\n".join(lines) + "\n"


def load_run_config(path):
    with open(path) as f:
        return parse_run_config(f.read())


def train_config_from(run):
    return TrainConfig(**{k: v for k, v in run.items() if k in TrainConfig.keys()})
