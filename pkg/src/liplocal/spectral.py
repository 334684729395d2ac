"""Masked power iteration, exact spectral-norm oracles and the warm-start cache."""

import math
import struct
import threading

import numpy as np

from liplocal import network
from liplocal.errors import ContractError, FormatError, ShapeError
from liplocal.tensor import DTYPE, conv2d, conv2d_transpose

ORACLE_MAX_DIM = 4096


def adjoint_operator(layer, y, weight=None):
    w = layer.weight if weight is None else weight
    if layer.kind == "linear":
        return y.reshape(y.shape[0], -1) @ w
    return conv2d_transpose(y, w, layer.stride, layer.padding, layer.in_shape[1:])


def _bnorm(t):
    return np.sqrt(np.sum(t.reshape(t.shape[0], -1) ** 2, axis=1))


def _bscale(t, s):
    return t * s.reshape((-1,) + (1,) * (t.ndim - 1))


def default_u0(shape, sample_ids, layer_index):
    """Unit vectors seeded by (sample id, layer index), one per sample."""
    out = np.empty((len(sample_ids),) + tuple(shape), dtype=DTYPE)
    for i, sid in enumerate(sample_ids):
        out[i] = np.random.default_rng([int(sid), int(layer_index)]).standard_normal(shape)
    return _bscale(out, 1.0 / _bnorm(out))


def masked_spectral_norm(layer, mask_in=None, mask_out=None, u0=None, n_iter=None, tol=1e-3,
                         max_iter=10000, weight=None, sample_ids=None, layer_index=0):
    """Estimate sigma_max(I_out W I_in) per sample by power iteration.

    ``mask_in`` has the layer's input shape (optionally with a leading batch
    axis), ``mask_out`` its output shape. With ``n_iter`` a fixed number of
    iterations runs; otherwise iteration stops once every sample's iterate
    moves by at most ``tol`` in l2. Returns ``(sigma, u, v)`` batched along
    axis 0; an all-zero operator yields sigma 0 with zero vectors.
    """
    w = layer.weight if weight is None else weight
    in_shape, out_shape = tuple(layer.in_shape), tuple(layer.out_shape)
    n, single = 1, True
    for t, s in ((mask_in, in_shape), (mask_out, out_shape), (u0, in_shape)):
        # count elements: a conv mask (N, C, H, W) may feed a linear layer with flat input
        if t is not None and np.size(t) != math.prod(s):
            if np.size(t) % math.prod(s):
                raise ShapeError(f"mask/vector of size {np.size(t)} does not fit shape {s}")
            n, single = max(n, np.size(t) // math.prod(s)), False
    m_in = np.ones((1,) + in_shape) if mask_in is None else np.asarray(mask_in, DTYPE).reshape((-1,) + in_shape)
    m_out = np.ones((1,) + out_shape) if mask_out is None else np.asarray(mask_out, DTYPE).reshape((-1,) + out_shape)
    ids = list(range(n)) if sample_ids is None else list(sample_ids)
    if u0 is None:
        u = default_u0(in_shape, ids, layer_index)
    else:
        u = np.array(u0, dtype=DTYPE).reshape((-1,) + in_shape)
        u = np.broadcast_to(u, (n,) + in_shape).copy()
    u = u * m_in
    un = _bnorm(u)
    dead = un == 0
    if np.any(dead):
        # warm start orthogonal to the current support: reseed on the support
        fresh = default_u0(in_shape, [ids[i] for i in np.flatnonzero(dead)], layer_index)
        u[dead] = fresh * np.broadcast_to(m_in, (n,) + in_shape)[dead]
        un = _bnorm(u)
    u = _bscale(u, 1.0 / np.where(un > 0, un, 1.0))

    def fwd(u):
        return m_out * network.apply_operator(layer, u, w).reshape((-1,) + out_shape)

    steps = n_iter if n_iter is not None else max_iter
    for _ in range(steps):
        wv = fwd(u)
        wn = _bnorm(wv)
        v = _bscale(wv, 1.0 / np.where(wn > 0, wn, 1.0))
        t = m_in * adjoint_operator(layer, m_out * v, w).reshape((-1,) + in_shape)
        tn = _bnorm(t)
        u_new = _bscale(t, 1.0 / np.where(tn > 0, tn, 1.0))
        delta = _bnorm(u_new - u)
        u = u_new
        if n_iter is None and np.all(delta <= tol):
            break
    wv = fwd(u)
    sigma = _bnorm(wv)
    v = _bscale(wv, 1.0 / np.where(sigma > 0, sigma, 1.0))
    zero = sigma == 0
    if np.any(zero):
        u[zero] = 0.0
        v[zero] = 0.0
    if single:
        return float(sigma[0]), u[0], v[0]
    return sigma, u, v


# exact oracles


def materialize_conv_matrix(layer, input_shape=None):
    """Explicit matrix M with vec(conv(x)) == M vec(x); test-sized layers only."""
    in_shape = tuple(layer.in_shape if input_shape is None else input_shape)
    n_in = math.prod(in_shape)
    if layer.kind == "linear":
        return np.array(layer.weight, dtype=DTYPE)
    if layer.kind != "conv":
        raise ContractError(f"cannot materialise layer kind {layer.kind!r}")
    out0 = conv2d(np.zeros((1,) + in_shape), layer.weight, layer.stride, layer.padding)
    n_out = out0.size
    if n_in > ORACLE_MAX_DIM or n_out > ORACLE_MAX_DIM:
        raise ContractError(f"conv matrix {n_out}x{n_in} exceeds the {ORACLE_MAX_DIM} guard")
    eye = np.eye(n_in, dtype=DTYPE).reshape((n_in,) + in_shape)
    return conv2d(eye, layer.weight, layer.stride, layer.padding).reshape(n_in, n_out).T.copy()


def spectral_norm_oracle(m):
    """Exact largest singular value from the eigenvalues of the smaller Gram matrix."""
    m = np.asarray(m, dtype=DTYPE)
    if m.ndim == 1:
        m = m[None, :]
    if max(m.shape) > ORACLE_MAX_DIM:
        raise ContractError(f"matrix {m.shape} exceeds the {ORACLE_MAX_DIM} guard")
    if m.size == 0:
        return 0.0
    gram = m @ m.T if m.shape[0] <= m.shape[1] else m.T @ m
    return float(math.sqrt(max(np.linalg.eigvalsh(gram)[-1], 0.0)))


def masked_matrix(layer, mask_in=None, mask_out=None):
    m = materialize_conv_matrix(layer)
    if mask_out is not None:
        m = m * np.asarray(mask_out, DTYPE).reshape(-1)[:, None]
    if mask_in is not None:
        m = m * np.asarray(mask_in, DTYPE).reshape(-1)[None, :]
    return m


# warm-start cache


class PowerIterCache:
    """Per-(sample, layer) power-iteration vectors kept in float32.

    Threads may share one cache as long as each works on its own sample ids.
    """

    def __init__(self):
        self._store = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._store)

    def __contains__(self, key):
        return key in self._store

    def get(self, sample_id, layer):
        hit = self._store.get((int(sample_id), int(layer)))
        if hit is None:
            return None
        u = hit[0].astype(DTYPE)
        nrm = np.linalg.norm(u)
        return u / nrm if nrm > 0 else None

    def put(self, sample_id, layer, u, epoch=0):
        with self._lock:
            self._store[(int(sample_id), int(layer))] = (np.asarray(u, np.float32).ravel().copy(), int(epoch))

    def epoch_of(self, sample_id, layer):
        return self._store[(int(sample_id), int(layer))][1]

    def get_batch(self, sample_ids, layer, shape):
        """Cached vectors for a batch; misses get the seeded default vector."""
        out = np.empty((len(sample_ids),) + tuple(shape), dtype=DTYPE)
        for i, sid in enumerate(sample_ids):
            u = self.get(sid, layer)
            if u is None or u.size != math.prod(shape):
                u = default_u0(shape, [sid], layer)[0]
            out[i] = u.reshape(shape)
        return out

    def put_batch(self, sample_ids, layer, u, epoch=0):
        for sid, row in zip(sample_ids, u):
            if np.any(row):
                self.put(sid, layer, row, epoch)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(struct.pack("<I", len(self._store)))
            for (sid, layer), (vec, epoch) in sorted(self._store.items()):
                f.write(struct.pack("<IHII", sid, layer, epoch, vec.size))
                f.write(vec.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            data = f.read()
        cache = cls()
        if len(data) < 4:
            raise FormatError("cache file shorter than its header", 0)
        (count,) = struct.unpack_from("<I", data, 0)
        pos = 4
        for _ in range(count):
            if pos + 14 > len(data):
                raise FormatError("truncated cache entry header", pos)
            sid, layer, epoch, length = struct.unpack_from("<IHII", data, pos)
            pos += 14
            if pos + 4 * length > len(data):
                raise FormatError("truncated cache vector", pos)
            vec = np.frombuffer(data, dtype="<f4", count=length, offset=pos).astype(np.float32)
            cache._store[(sid, layer)] = (vec, epoch)
            pos += 4 * length
        if pos != len(data):
            raise FormatError("trailing bytes after cache entries", pos)
        return cache
