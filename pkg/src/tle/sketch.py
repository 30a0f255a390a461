"""Count Sketch and Tensor Sketch (compact bilinear) encodings.

Hash and sign tables come from SplitMix64 used as a counter-based
generator: output ``i`` of stream ``seed`` is ``mix(seed + (i+1) * gamma)``
with gamma = 0x9E3779B97F4A7C15.  Coordinate ``j`` takes its bucket from
output ``2j`` (mod d) and its sign from the top bit of output ``2j+1``.
Tables are therefore a pure function of ``(c, d, seed)`` and only that
triple needs to be stored.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fft import check_residue, fft, full_spectrum, ifft, next_fast_len, rfft
from .tensor import EncodedVector, FeatureMap, ShapeError, flatten_spatial, unflatten_spatial

__all__ = [
    "splitmix64",
    "SketchParams",
    "TensorSketchEncoder",
    "sketch_params_new",
    "count_sketch_apply",
    "count_sketch_transpose",
    "tensor_sketch",
    "tensor_sketch_grad",
    "tensor_sketch_forward",
    "tensor_sketch_backward",
    "sketch_matrix",
]

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of the SplitMix64 stream for ``seed`` (uint64)."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + (np.arange(1, n + 1, dtype=np.uint64) * _GAMMA)
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


@dataclass(frozen=True, eq=False)
class SketchParams:
    c: int
    d: int
    seed: int
    buckets: np.ndarray = field(repr=False)
    signs: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.buckets.shape != (self.c,) or self.signs.shape != (self.c,):
            raise ShapeError("hash and sign tables must have length c")
        if self.buckets.size and (self.buckets.min() < 0 or self.buckets.max() >= self.d):
            raise ValueError("bucket index out of range [0, d)")
        if not np.all(np.abs(self.signs) == 1):
            raise ValueError("signs must be +1 or -1")
        self.buckets.flags.writeable = False
        self.signs.flags.writeable = False

    @classmethod
    def from_tables(cls, buckets, signs, d: int, seed: int = -1) -> "SketchParams":
        """Hand-built tables (tests, identity sketches); ``seed`` is informational."""
        buckets = np.asarray(buckets, dtype=np.int64).copy()
        signs = np.asarray(signs, dtype=np.float64).copy()
        return cls(c=buckets.size, d=d, seed=seed, buckets=buckets, signs=signs)

    def matrix(self) -> np.ndarray:
        """Dense ``c x d`` projection matrix (row j has s(j) at column h(j))."""
        P = np.zeros((self.c, self.d))
        P[np.arange(self.c), self.buckets] = self.signs
        return P

    def __eq__(self, other):
        if not isinstance(other, SketchParams):
            return NotImplemented
        return (self.c, self.d) == (other.c, other.d) and np.array_equal(self.buckets, other.buckets) \
            and np.array_equal(self.signs, other.signs)


def sketch_params_new(c: int, d: int, seed: int) -> SketchParams:
    if c < 1 or d < 1:
        raise ValueError(f"sketch dimensions must be positive, got c={c}, d={d}")
    stream = splitmix64(int(seed), 2 * c)
    buckets = (stream[0::2] % np.uint64(d)).astype(np.int64)
    signs = np.where(stream[1::2] >> np.uint64(63), -1.0, 1.0)
    return SketchParams(c=c, d=d, seed=int(seed) & _MASK64, buckets=buckets, signs=signs)


def count_sketch_apply(v, p: SketchParams) -> np.ndarray:
    """``out[b] = sum_{i: h(i) = b} s(i) v[i]`` over the last axis of ``v``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != p.c:
        raise ShapeError(f"input length {v.shape[-1]} != sketch input dim {p.c}")
    lead = v.shape[:-1]
    rows = int(np.prod(lead)) if lead else 1
    # one bincount over all rows: row r's bucket b lands in slot r*d + b
    slots = (np.arange(rows)[:, None] * p.d + p.buckets).ravel()
    out = np.bincount(slots, weights=(v.reshape(rows, p.c) * p.signs).ravel(), minlength=rows * p.d)
    return out.reshape(lead + (p.d,))


def count_sketch_transpose(g, p: SketchParams) -> np.ndarray:
    """Adjoint of :func:`count_sketch_apply`: a signed gather."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape[-1] != p.d:
        raise ShapeError(f"gradient length {g.shape[-1]} != sketch output dim {p.d}")
    return g[..., p.buckets] * p.signs


@dataclass(frozen=True)
class TensorSketchEncoder:
    """Pair of count sketches.  Spectra for the Gram route are cached lazily."""

    p1: SketchParams
    p2: SketchParams

    def __post_init__(self):
        if (self.p1.c, self.p1.d) != (self.p2.c, self.p2.d):
            raise ShapeError("both count sketches must share (c, d)")
        if self.p1.seed == self.p2.seed:
            raise ValueError("the two count sketches need distinct seeds")

    @classmethod
    def create(cls, c: int, d: int, seed: int) -> "TensorSketchEncoder":
        # two streams derived from one seed; the second is offset by a mixed
        # constant so nearby user seeds never share a table
        s1 = int(seed) & _MASK64
        s2 = int(splitmix64(s1 ^ 0x5DEECE66D, 1)[0])
        if s2 == s1:
            s2 = (s1 + 1) & _MASK64
        return cls(sketch_params_new(c, d, s1), sketch_params_new(c, d, s2))

    @property
    def c(self) -> int:
        return self.p1.c

    @property
    def d(self) -> int:
        return self.p1.d


# when the c^2 x d table of pairwise basis-spectrum products is small, the
# per-location FFTs collapse into one real matrix product with the c x c
# Gram matrix (same numbers, far fewer transforms)
GRAM_ROUTE_MAX_ENTRIES = 1 << 22
_CHUNK = 1 << 22  # complex entries held per batch chunk


def _pair_spectra(enc: TensorSketchEncoder) -> np.ndarray:
    """Row ``i*c + j`` is ``FFT(e1_i) * FFT(e2_j)`` as interleaved re/im floats."""
    cache = enc.__dict__.get("_pair_spectra")
    if cache is None:
        E1, E2 = fft(enc.p1.matrix()), fft(enc.p2.matrix())
        pairs = (E1[:, None, :] * E2[None, :, :]).reshape(enc.c * enc.c, enc.d)
        cache = np.ascontiguousarray(pairs).view(np.float64)
        object.__setattr__(enc, "_pair_spectra", cache)
    return cache


def _ts_fft(M, enc):
    # circular convolution mod d done as a zero-padded linear convolution:
    # d may be FFT-unfriendly (8196 = 4 * 3 * 683) while a padded 5-smooth
    # length is fast.  Per-location products are summed in the frequency
    # domain so each row needs one inverse transform.
    d = enc.d
    n = next_fast_len(2 * d - 1)
    fa = rfft(count_sketch_apply(M, enc.p1), n)
    fb = rfft(count_sketch_apply(M, enc.p2), n)
    lin = ifft(full_spectrum((fa * fb).sum(axis=-2), n))
    check_residue(lin)
    out = lin[..., :d].real.copy()
    out[..., :d - 1] += lin[..., d:2 * d - 1].real
    return out


def _ts_gram(M, enc):
    # sum_l FFT(cs1 m_l) * FFT(cs2 m_l) = sum_ij G_ij E1_i * E2_j with G = M^T M
    G = np.swapaxes(M, -1, -2) @ M
    spec = (G.reshape(G.shape[0], -1) @ _pair_spectra(enc)).view(np.complex128)
    out = ifft(spec)
    check_residue(out)
    return out.real


def tensor_sketch(X, enc: TensorSketchEncoder, route: str = "auto") -> np.ndarray:
    """Array version: trailing ``(h, w, c)`` axes, leading batch axes allowed.

    ``route`` picks the evaluation strategy (``fft``, ``gram`` or ``auto``);
    both give the same sketch up to roundoff.
    """
    M = flatten_spatial(X)
    if M.shape[-1] != enc.c:
        raise ShapeError(f"map has {M.shape[-1]} channels, encoder expects {enc.c}")
    if route == "auto":
        route = "gram" if enc.c * enc.c * enc.d <= GRAM_ROUTE_MAX_ENTRIES else "fft"
    if route not in ("fft", "gram"):
        raise ValueError(f"route must be 'auto', 'fft' or 'gram', got {route!r}")
    lead, (L, c) = M.shape[:-2], M.shape[-2:]
    rows = M.reshape((-1, L, c))
    if route == "gram":
        fn, per_row = _ts_gram, enc.d
    else:
        fn, per_row = _ts_fft, L * next_fast_len(2 * enc.d - 1)
    step = max(1, _CHUNK // per_row)
    out = np.concatenate([fn(rows[i:i + step], enc) for i in range(0, rows.shape[0], step)]) \
        if rows.shape[0] else np.zeros((0, enc.d))
    return out.reshape(lead + (enc.d,))


def tensor_sketch_grad(X, enc: TensorSketchEncoder, dy) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape[-1] != enc.d:
        raise ShapeError(f"upstream gradient has length {dy.shape[-1]}, expected d = {enc.d}")
    h, w, c = X.shape[-3:]
    if c != enc.c:
        raise ShapeError(f"map has {c} channels, encoder expects {enc.c}")
    M = flatten_spatial(X)
    fa = fft(count_sketch_apply(M, enc.p1))
    fb = fft(count_sketch_apply(M, enc.p2))
    # every location receives the same upstream gradient (sum pooling);
    # the adjoint of convolving with b is correlating with b
    fg = fft(dy)[..., None, :]
    da = ifft(fg * np.conj(fb))
    db = ifft(fg * np.conj(fa))
    check_residue(da)
    check_residue(db)
    da, db = da.real, db.real
    dM = count_sketch_transpose(da, enc.p1) + count_sketch_transpose(db, enc.p2)
    return unflatten_spatial(dM, h, w)


def tensor_sketch_forward(X: FeatureMap, enc: TensorSketchEncoder) -> EncodedVector:
    return EncodedVector(tensor_sketch(X, enc))


def tensor_sketch_backward(X: FeatureMap, enc: TensorSketchEncoder, dy) -> FeatureMap:
    return FeatureMap(tensor_sketch_grad(X, enc, dy))


def sketch_matrix(enc: TensorSketchEncoder) -> np.ndarray:
    """Explicit ``d x c^2`` matrix T with ``TS(x) = T vec(x x^T)``.

    Column ``j*c + i`` (the column-concatenated position of entry (i, j))
    holds ``s1(i) s2(j)`` at row ``(h1(i) + h2(j)) mod d``.  Only practical
    for small c; used to cross-check the FFT route.
    """
    c, d = enc.c, enc.d
    T = np.zeros((d, c * c))
    for i in range(c):
        for j in range(c):
            T[(enc.p1.buckets[i] + enc.p2.buckets[j]) % d, j * c + i] += enc.p1.signs[i] * enc.p2.signs[j]
    return T
