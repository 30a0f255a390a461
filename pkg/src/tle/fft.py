"""Discrete Fourier transforms along the last axis.

``fft``/``ifft`` are the production transforms (numpy's pocketfft, which
handles any length).  ``fft_reference`` is a self-contained radix-2 +
Bluestein implementation kept as an independent cross-check; it is
slower but needs nothing beyond complex multiplication.
"""
from __future__ import annotations

import numpy as np

__all__ = ["fft", "ifft", "rfft", "fft_reference", "ifft_reference", "circular_convolve", "circular_correlate",
           "check_residue", "next_fast_len", "full_spectrum"]


def fft(x) -> np.ndarray:
    return np.fft.fft(x, axis=-1)


def ifft(x) -> np.ndarray:
    return np.fft.ifft(x, axis=-1)


def rfft(x, n: int | None = None) -> np.ndarray:
    return np.fft.rfft(x, n=n, axis=-1)


def next_fast_len(m: int) -> int:
    """Smallest 2^a 3^b 5^c that is >= m (cheap transform lengths)."""
    best = 1 << max(0, (m - 1).bit_length())
    p5 = 1
    while p5 < best:
        p35 = p5
        while p35 < best:
            q = p35
            while q < m:
                q *= 2
            best = min(best, q)
            p35 *= 3
        p5 *= 5
    return best


def full_spectrum(half: np.ndarray, n: int) -> np.ndarray:
    """Rebuild the length-n spectrum of a real signal from its rfft half."""
    tail = np.conj(half[..., 1:n - half.shape[-1] + 1][..., ::-1])
    return np.concatenate([half, tail], axis=-1)


def _fft_pow2(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n == 1:
        return x.astype(np.complex128)
    even = _fft_pow2(x[..., 0::2])
    odd = _fft_pow2(x[..., 1::2])
    tw = np.exp(-2j * np.pi * np.arange(n // 2) / n) * odd
    return np.concatenate([even + tw, even - tw], axis=-1)


def _bluestein(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    m = 1 << (2 * n - 2).bit_length()
    k = np.arange(n)
    # k^2 mod 2n keeps the chirp phase argument small for large n
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:][::-1])
    conv = _ifft_pow2(_fft_pow2(a) * _fft_pow2(b))
    return chirp * conv[..., :n]


def _ifft_pow2(x: np.ndarray) -> np.ndarray:
    return np.conj(_fft_pow2(np.conj(x))) / x.shape[-1]


def fft_reference(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n < 1:
        raise ValueError("transform length must be positive")
    if n & (n - 1) == 0:
        return _fft_pow2(x)
    return _bluestein(x)


def ifft_reference(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    return np.conj(fft_reference(np.conj(x))) / x.shape[-1]


def circular_convolve(a, b, residue_tol: float = 1e-8) -> np.ndarray:
    """Real circular convolution via the frequency domain.

    The imaginary part left by the inverse transform is roundoff; it is
    checked against ``residue_tol`` (relative to the output scale, floor 1)
    and dropped.
    """
    out = ifft(fft(a) * fft(b))
    check_residue(out, residue_tol)
    return out.real


def circular_correlate(g, b, residue_tol: float = 1e-8) -> np.ndarray:
    """``r[j] = sum_k g[k] b[(k - j) mod n]``, the adjoint of convolving with b."""
    out = ifft(fft(g) * np.conj(fft(b)))
    check_residue(out, residue_tol)
    return out.real


def check_residue(out: np.ndarray, tol: float = 1e-8) -> None:
    """Raise if the imaginary part of an inverse transform is more than roundoff."""
    if out.size == 0:
        return
    scale = max(1.0, float(np.abs(out.real).max()))
    resid = float(np.abs(out.imag).max())
    if resid > tol * scale:
        raise FloatingPointError(f"imaginary residue {resid:.3e} exceeds {tol:g} x scale {scale:.3e}")
