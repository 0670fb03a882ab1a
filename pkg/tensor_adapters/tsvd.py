"""
Tensor SVD (t-SVD) through per-Fourier-slice matrix SVDs.

For a real tensor A (n1 x n2 x n3) the factorization A = U * S * V^T is
computed by transforming A along the third mode, taking a full SVD of each
Fourier slice and transforming the stacked factors back. Only slices
0..n3//2 are decomposed; the remaining ones are filled with complex
conjugates so the spatial factors come out real. Slice 0 (and slice n3/2
when n3 is even) is real, so it gets a real SVD.
"""

import logging
from dataclasses import dataclass

import torch

from .exceptions import DecompositionError, InvalidArgumentError
from .tensor3 import Tensor3, _discard_imaginary, fnorm, tprod, ttranspose

logger = logging.getLogger(__name__)

DEFAULT_TUBAL_RANK_TOL = 1e-9


@dataclass(frozen=True)
class TSVDFactors:
    """Full t-SVD: U (n1 x n1 x n3), S (n1 x n2 x n3, f-diagonal), V (n2 x n2 x n3)."""

    U: Tensor3
    S: Tensor3
    V: Tensor3
    # Fourier-domain singular values, shape (n3, min(n1, n2)), descending per slice.
    fourier_singular_values: torch.Tensor = None

    @property
    def shape(self):
        return (self.U.n1, self.V.n1, self.U.n3)


@dataclass(frozen=True)
class LowRankFactors:
    """Rank-r t-SVD factors: U_r (n1 x r x n3), S_r (r x r x n3), V_r (n2 x r x n3)."""

    U: Tensor3
    S: Tensor3
    V: Tensor3

    def __post_init__(self):
        r = self.U.n2
        if self.S.n1 != r or self.S.n2 != r or self.V.n2 != r:
            raise InvalidArgumentError(
                f"inconsistent low-rank factors: U {self.U}, S {self.S}, V {self.V}"
            )
        if not (self.U.n3 == self.S.n3 == self.V.n3):
            raise InvalidArgumentError("low-rank factors disagree on n3")
        if r > min(self.U.n1, self.V.n1):
            raise InvalidArgumentError(
                f"rank {r} exceeds min(n1, n2) = {min(self.U.n1, self.V.n1)}"
            )

    @classmethod
    def from_tubes(cls, U, s_tubes, V):
        """Build from U, V and the (r, n3) diagonal tubes of S_r."""
        return cls(U, f_diagonal(s_tubes), V)

    @property
    def r(self):
        return self.U.n2

    @property
    def shape(self):
        return (self.U.n1, self.V.n1, self.U.n3)

    @property
    def s_tubes(self):
        """Diagonal tubes of S_r, shape (r, n3)."""
        return torch.diagonal(self.S.slices, dim1=1, dim2=2).T.contiguous()


def f_diagonal(tubes, n1=None, n2=None):
    """
    f-diagonal tensor with ``tubes[j]`` on the (j, j) tube; off-diagonal
    entries are exactly zero.
    """
    r, n3 = tubes.shape
    n1 = r if n1 is None else n1
    n2 = r if n2 is None else n2
    diagonal = torch.diag_embed(tubes.T.to(torch.float64))
    if (n1, n2) == (r, r):
        return Tensor3(diagonal)
    slices = torch.zeros(n3, n1, n2, dtype=torch.float64)
    slices[:, :r, :r] = diagonal
    return Tensor3(slices)


def _slice_svd(matrix, k, real):
    try:
        if real:
            u, s, vh = torch.linalg.svd(matrix.real, full_matrices=True)
            return u.to(torch.complex128), s, vh.mH.to(torch.complex128)
        u, s, vh = torch.linalg.svd(matrix, full_matrices=True)
        return u, s, vh.mH
    except torch.linalg.LinAlgError as exc:
        raise DecompositionError(
            f"SVD did not converge on Fourier slice {k}: {exc}", slice_index=k
        ) from exc


def tsvd(a):
    """Full t-SVD of ``a``."""
    n1, n2, n3 = a.shape
    logger.debug(f"t-SVD of {a}")
    a_hat = torch.fft.fft(a.slices, dim=0)
    u_hat = torch.zeros(n3, n1, n1, dtype=torch.complex128)
    v_hat = torch.zeros(n3, n2, n2, dtype=torch.complex128)
    sigma = torch.zeros(n3, min(n1, n2), dtype=torch.float64)

    half = n3 // 2
    for k in range(half + 1):
        real = k == 0 or (n3 % 2 == 0 and k == half)
        u, s, v = _slice_svd(a_hat[k], k, real)
        u_hat[k], sigma[k], v_hat[k] = u, s, v
        mirror = (n3 - k) % n3
        if mirror != k:
            u_hat[mirror], sigma[mirror], v_hat[mirror] = u.conj(), s, v.conj()

    U = Tensor3(_discard_imaginary(torch.fft.ifft(u_hat, dim=0), _unit_scale(n1, n3), 't-SVD U'))
    V = Tensor3(_discard_imaginary(torch.fft.ifft(v_hat, dim=0), _unit_scale(n2, n3), 't-SVD V'))
    s_tubes = torch.fft.ifft(sigma.to(torch.complex128), dim=0)
    s_tubes = _discard_imaginary(s_tubes, fnorm(a), 't-SVD S').T
    S = f_diagonal(s_tubes, n1, n2)
    return TSVDFactors(U=U, S=S, V=V, fourier_singular_values=sigma)


def _unit_scale(n, n3):
    # Frobenius norm of an n x n x n3 orthogonal tensor is sqrt(n)
    return max(1.0, float(n) ** 0.5)


def truncate_split(f, r):
    """
    Split a full t-SVD into its rank-r principal factors and the residual.

    The residual is rebuilt from the complementary factor slices (r+1..), so
    principal + residual reproduces the decomposed tensor.
    """
    n1, n2, n3 = f.shape
    m = min(n1, n2)
    if not isinstance(r, int) or r < 1 or r > m:
        raise InvalidArgumentError(f"rank {r} out of range 1..{m}")

    diag = torch.diagonal(f.S.slices, dim1=1, dim2=2).T
    principal = LowRankFactors(
        U=Tensor3(f.U.slices[:, :, :r]),
        S=f_diagonal(diag[:r]),
        V=Tensor3(f.V.slices[:, :, :r]),
    )
    if r == m:
        residual = Tensor3.zeros(n1, n2, n3)
    else:
        complement = LowRankFactors(
            U=Tensor3(f.U.slices[:, :, r:m]),
            S=f_diagonal(diag[r:m]),
            V=Tensor3(f.V.slices[:, :, r:m]),
        )
        residual = reconstruct(complement)
    logger.debug(f"split {n1}x{n2}x{n3} at rank {r}: residual norm {fnorm(residual):.3e}")
    return principal, residual


def reconstruct(p):
    """U_r * S_r * V_r^T."""
    return tprod(tprod(p.U, p.S), ttranspose(p.V))


def fourier_singular_values(a):
    """Singular values of every Fourier slice, shape (n3, min(n1, n2))."""
    a_hat = torch.fft.fft(a.slices.detach(), dim=0)
    return torch.linalg.svdvals(a_hat)


def tubal_rank(a, tol=DEFAULT_TUBAL_RANK_TOL):
    """
    Largest per-Fourier-slice count of singular values above tol * sigma_max,
    sigma_max being the largest singular value over all slices.
    """
    if tol < 0:
        raise InvalidArgumentError(f"tol must be nonnegative, got {tol}")
    sigma = fourier_singular_values(a)
    top = float(sigma.max())
    if top == 0.0:
        return 0
    return int((sigma > tol * top).sum(dim=1).max())


def captured_energy(a, r):
    """Fraction of ||a||_F^2 held by the rank-r principal part (Parseval)."""
    sigma = fourier_singular_values(a)
    total = float((sigma ** 2).sum())
    if total == 0.0:
        return 1.0
    return float((sigma[:, :r] ** 2).sum()) / total
