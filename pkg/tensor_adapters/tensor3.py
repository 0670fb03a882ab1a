"""
Third-order real tensors and the t-product algebra.

A ``Tensor3`` of shape n1 x n2 x n3 keeps its frontal slices in a float64
torch tensor of shape (n3, n1, n2), so element (i, j, k) lives at flat
offset k*n1*n2 + i*n2 + j (third index slowest).

FFT convention: ``fft_mode3`` is the unnormalized DFT along the third
mode, ``ifft_mode3`` carries the 1/n3 factor. Every Fourier-domain identity
in this package (Parseval, block diagonalization) is written against that
pair.

Inverse transforms return real data up to rounding: the imaginary part is
checked against IMAG_TOL times a scale and then dropped. For a t-product the
scale is ||a||_F * ||b||_F, which bounds every entry of a * b by
Cauchy-Schwarz, rather than max(||a||_F, ||b||_F), which is not a bound on
the product when both operands are large or both are small.

Values are treated as immutable: operations always return new tensors.
"""

import logging
from dataclasses import dataclass

import torch

from .exceptions import InvalidArgumentError, NumericError, OracleLimitError

logger = logging.getLogger(__name__)

# Imaginary residue allowed after an inverse FFT, relative to operand scale.
IMAG_TOL = 1e-9
DEFAULT_ORACLE_LIMIT = 4096


@dataclass(frozen=True)
class Tensor3:
    """Dense real third-order tensor stored as a stack of frontal slices."""

    slices: torch.Tensor

    def __post_init__(self):
        data = self.slices
        if not isinstance(data, torch.Tensor):
            data = torch.as_tensor(data)
        if data.dim() != 3:
            raise InvalidArgumentError(
                f"Tensor3 needs a 3-d slice stack, got {tuple(data.shape)}"
            )
        if any(size == 0 for size in data.shape):
            raise InvalidArgumentError(
                f"Tensor3 dimensions must be positive, got {_shape_of(data)}"
            )
        if data.dtype != torch.float64:
            data = data.to(torch.float64)
        if not bool(torch.isfinite(data.detach()).all()):
            raise NumericError("Tensor3 entries must be finite")
        object.__setattr__(self, 'slices', data)

    @classmethod
    def from_flat(cls, n1, n2, n3, data):
        """Build from a flat sequence in the frontal-slice-major layout."""
        flat = torch.as_tensor(data, dtype=torch.float64)
        if flat.numel() != n1 * n2 * n3:
            raise InvalidArgumentError(
                f"flat data has {flat.numel()} entries, expected {n1}*{n2}*{n3}"
            )
        return cls(flat.reshape(n3, n1, n2))

    @classmethod
    def zeros(cls, n1, n2, n3):
        return cls(torch.zeros(n3, n1, n2, dtype=torch.float64))

    @classmethod
    def random(cls, n1, n2, n3, generator=None):
        return cls(torch.randn(n3, n1, n2, dtype=torch.float64, generator=generator))

    @property
    def n1(self):
        return self.slices.shape[1]

    @property
    def n2(self):
        return self.slices.shape[2]

    @property
    def n3(self):
        return self.slices.shape[0]

    @property
    def shape(self):
        """Mathematical shape (n1, n2, n3)."""
        return (self.n1, self.n2, self.n3)

    def frontal(self, k):
        """Frontal slice k (0-based) as an n1 x n2 matrix."""
        return self.slices[k]

    def flat(self):
        return self.slices.reshape(-1)

    def __add__(self, other):
        _require_same_shape(self, other, 'add')
        return Tensor3(self.slices + other.slices)

    def __sub__(self, other):
        _require_same_shape(self, other, 'subtract')
        return Tensor3(self.slices - other.slices)

    def __str__(self):
        return f"Tensor3({self.n1}x{self.n2}x{self.n3})"


@dataclass(frozen=True)
class ComplexTensor3:
    """Mode-3 Fourier transform of a Tensor3 (complex128 slices, (n3, n1, n2))."""

    slices: torch.Tensor

    @property
    def n1(self):
        return self.slices.shape[1]

    @property
    def n2(self):
        return self.slices.shape[2]

    @property
    def n3(self):
        return self.slices.shape[0]

    @property
    def shape(self):
        return (self.n1, self.n2, self.n3)

    def interleaved(self):
        """Flat (real, imaginary) float64 pairs in frontal-slice-major order."""
        return torch.view_as_real(self.slices.contiguous()).reshape(-1)

    def conjugate_symmetry_error(self):
        """
        Largest deviation between slice k and conj(slice n3-k), relative to
        the tensor norm. Zero for the transform of any real tensor.
        """
        mirrored = torch.roll(torch.flip(self.slices, dims=[0]), shifts=1, dims=0)
        deviation = torch.linalg.vector_norm(self.slices - mirrored.conj())
        scale = torch.linalg.vector_norm(self.slices)
        if scale == 0:
            return 0.0
        return float(deviation / scale)


def _shape_of(data):
    n3, n1, n2 = data.shape
    return f"{n1}x{n2}x{n3}"


def _require_same_shape(a, b, what):
    if a.shape != b.shape:
        raise InvalidArgumentError(f"cannot {what} {a} and {b}: shapes differ")


def _discard_imaginary(z, scale, what):
    """Return the real part of ``z`` after checking the imaginary residue."""
    residue = float(z.imag.detach().abs().max()) if z.numel() else 0.0
    limit = IMAG_TOL * scale
    if residue > limit:
        raise NumericError(
            f"{what}: imaginary residue {residue:.3e} exceeds {limit:.3e}"
        )
    return z.real.contiguous()


def fft_mode3(t):
    """Unnormalized DFT of every tube (along the third mode)."""
    if t.n1 == 0 or t.n2 == 0 or t.n3 == 0:
        raise InvalidArgumentError(f"cannot transform empty tensor {t}")
    return ComplexTensor3(torch.fft.fft(t.slices, dim=0))


def ifft_mode3(t):
    """Inverse of ``fft_mode3`` (1/n3 normalized), truncated to real."""
    if t.n1 == 0 or t.n2 == 0 or t.n3 == 0:
        raise InvalidArgumentError("cannot transform an empty tensor")
    spatial = torch.fft.ifft(t.slices, dim=0)
    scale = float(torch.linalg.vector_norm(t.slices.detach()))
    return Tensor3(_discard_imaginary(spatial, scale, 'ifft_mode3'))


def tprod(a, b):
    """
    t-product a * b computed slice-wise in the Fourier domain.

    Result shape is a.n1 x b.n2 x n3. Agrees with ``tprod_oracle`` to
    rounding error.
    """
    _check_conformable(a, b)
    a_hat = torch.fft.fft(a.slices, dim=0)
    b_hat = torch.fft.fft(b.slices, dim=0)
    product = torch.fft.ifft(torch.matmul(a_hat, b_hat), dim=0)
    scale = fnorm(a) * fnorm(b)
    return Tensor3(_discard_imaginary(product, scale, 'tprod'))


def _check_conformable(a, b):
    if a.n2 != b.n1 or a.n3 != b.n3:
        raise InvalidArgumentError(
            f"t-product shape mismatch: {a.n1}x{a.n2}x{a.n3} * {b.n1}x{b.n2}x{b.n3}"
        )


def circ(a):
    """Block-circulant matrix of a: block (i, j) is frontal slice (i - j) mod n3."""
    n3 = a.n3
    rows = []
    for i in range(n3):
        rows.append(torch.cat([a.slices[(i - j) % n3] for j in range(n3)], dim=1))
    return torch.cat(rows, dim=0)


def matvec(b):
    """Frontal slices of b stacked vertically: an (n2*n3) x l matrix."""
    return b.slices.reshape(b.n3 * b.n1, b.n2)


def fold(matrix, n3):
    """Inverse of ``matvec``: split a (n1*n3) x l matrix into n3 frontal slices."""
    rows, cols = matrix.shape
    if rows % n3:
        raise InvalidArgumentError(f"cannot fold {rows} rows into {n3} slices")
    return Tensor3(matrix.reshape(n3, rows // n3, cols))


def tprod_oracle(a, b, limit=DEFAULT_ORACLE_LIMIT):
    """
    Reference t-product fold(circ(a) . MatVec(b)).

    Materializes the full block-circulant matrix, so it is only meant for
    checking ``tprod`` on small operands.
    """
    _check_conformable(a, b)
    if a.n1 * a.n3 > limit:
        raise OracleLimitError(
            f"oracle refuses n1*n3 = {a.n1 * a.n3} > {limit}"
        )
    return fold(circ(a) @ matvec(b), a.n3)


def ttranspose(a):
    """
    Tensor transpose: slice 1 transposed, slices 2..n3 transposed in reverse order.
    """
    order = [0] + list(range(a.n3 - 1, 0, -1))
    return Tensor3(a.slices[order].transpose(1, 2).contiguous())


def identity_tensor(n, n3):
    """Identity for the t-product: first frontal slice I_n, all others zero."""
    if n < 1 or n3 < 1:
        raise InvalidArgumentError(f"identity_tensor needs n, n3 >= 1, got {n}, {n3}")
    slices = torch.zeros(n3, n, n, dtype=torch.float64)
    slices[0] = torch.eye(n, dtype=torch.float64)
    return Tensor3(slices)


def fnorm(a):
    """Frobenius norm as a Python float."""
    return float(torch.linalg.vector_norm(a.slices.detach()))
