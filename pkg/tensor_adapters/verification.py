"""
Seeded property suites run by ``manage.py verify``.

Each suite draws random instances from a generator seeded with the given
seed and checks one property per entry, returning PropertyResult records.
The brute-force oracles here (per-slice numpy SVD, all-pairs boundary
distances, breadth-first flood fill) are deliberately independent of the
code paths they check.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .adapters import EncoderWeights, build_lorapt, build_pissa, tensorize
from .conf import get_setting
from .segmetrics import Mask3D, dice, dice_loss, hd95, remove_small_components
from .tensor3 import (
    Tensor3,
    circ,
    fft_mode3,
    fnorm,
    identity_tensor,
    tprod,
    tprod_oracle,
    ttranspose,
)
from .tinymodel import (
    ModelConfig,
    TinyEncoder,
    build_weight_source,
    finite_diff_check,
    grad_adapter,
    task_loss,
    trainable_parameters,
)
from .tsvd import reconstruct, truncate_split, tsvd

logger = logging.getLogger(__name__)

GRAD_REL_TOL = 1e-5
GRAD_ABS_TOL = 1e-8


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str = ''


def _max_abs(x):
    return float(torch.as_tensor(x).abs().max()) if torch.as_tensor(x).numel() else 0.0


def _rand_dims(rng, upper, count):
    return [int(rng.integers(1, upper + 1)) for _ in range(count)]


def dft_matrix(n):
    """Unnormalized DFT matrix F[j, k] = exp(-2 pi i jk / n)."""
    index = torch.arange(n, dtype=torch.float64)
    return torch.exp(-2j * math.pi * torch.outer(index, index) / n)


def block_diagonalization_error(a):
    """
    (F (x) I_n1) circ(a) (F* (x) I_n2) / n3 against blockdiag(A_hat_k):
    returns (largest off-diagonal block entry, largest diagonal mismatch).
    """
    n1, n2, n3 = a.shape
    F = dft_matrix(n3)
    left = torch.kron(F, torch.eye(n1, dtype=torch.complex128))
    right = torch.kron(F.conj(), torch.eye(n2, dtype=torch.complex128)) / n3
    transformed = left @ circ(a).to(torch.complex128) @ right
    a_hat = fft_mode3(a).slices
    off, diag = 0.0, 0.0
    for i in range(n3):
        for j in range(n3):
            block = transformed[i * n1:(i + 1) * n1, j * n2:(j + 1) * n2]
            if i == j:
                diag = max(diag, _max_abs(block - a_hat[i]))
            else:
                off = max(off, _max_abs(block))
    return off, diag


def slice_singular_values(a):
    """Per-Fourier-slice singular values via numpy (independent oracle)."""
    spatial = a.slices.detach().numpy()
    a_hat = np.fft.fft(spatial, axis=0)
    return np.stack([np.linalg.svd(m, compute_uv=False) for m in a_hat])


def tprod_suite(seed):
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    limit = get_setting('ORACLE_LIMIT')
    results = []

    worst = 0.0
    for _ in range(100):
        n1, n2, l, n3 = _rand_dims(rng, 8, 4)
        a, b = Tensor3.random(n1, n2, n3, gen), Tensor3.random(n2, l, n3, gen)
        worst = max(worst, _max_abs(tprod(a, b).slices - tprod_oracle(a, b, limit=limit).slices))
    results.append(PropertyResult('oracle equivalence', worst <= 1e-10, f"max |fast - oracle| = {worst:.3e}"))

    off_worst, diag_worst = 0.0, 0.0
    for _ in range(20):
        n1, n2, n3 = _rand_dims(rng, 5, 3)
        off, diag = block_diagonalization_error(Tensor3.random(n1, n2, n3, gen))
        off_worst, diag_worst = max(off_worst, off), max(diag_worst, diag)
    results.append(PropertyResult(
        'DFT block diagonalization', off_worst <= 1e-9 and diag_worst <= 1e-9,
        f"off-diagonal {off_worst:.3e}, diagonal mismatch {diag_worst:.3e}",
    ))

    worst = 0.0
    for _ in range(20):
        n1, n2, n4, n5, n3 = _rand_dims(rng, 6, 5)
        a = Tensor3.random(n1, n2, n3, gen)
        b = Tensor3.random(n2, n4, n3, gen)
        c = Tensor3.random(n4, n5, n3, gen)
        worst = max(worst, _max_abs(tprod(tprod(a, b), c).slices - tprod(a, tprod(b, c)).slices))
    results.append(PropertyResult('associativity', worst <= 1e-9, f"max difference {worst:.3e}"))

    worst = 0.0
    for _ in range(20):
        n1, n2, l, n3 = _rand_dims(rng, 6, 4)
        a, b = Tensor3.random(n1, n2, n3, gen), Tensor3.random(n2, l, n3, gen)
        lhs = ttranspose(tprod(a, b))
        rhs = tprod_oracle(ttranspose(b), ttranspose(a), limit=limit)
        worst = max(worst, _max_abs(lhs.slices - rhs.slices))
    results.append(PropertyResult('transpose reverses products', worst <= 1e-10, f"max difference {worst:.3e}"))

    worst_sym, worst_parseval, worst_identity = 0.0, 0.0, 0.0
    for _ in range(20):
        n1, n2, n3 = _rand_dims(rng, 8, 3)
        a = Tensor3.random(n1, n2, n3, gen)
        fourier = fft_mode3(a)
        worst_sym = max(worst_sym, fourier.conjugate_symmetry_error())
        spectral = float(torch.linalg.vector_norm(fourier.slices)) / math.sqrt(n3)
        worst_parseval = max(worst_parseval, abs(fnorm(a) - spectral) / fnorm(a))
        worst_identity = max(worst_identity, _max_abs(tprod(identity_tensor(n1, n3), a).slices - a.slices))
    results.append(PropertyResult('conjugate symmetry', worst_sym <= 1e-12, f"{worst_sym:.3e}"))
    results.append(PropertyResult('Parseval', worst_parseval <= 1e-10, f"{worst_parseval:.3e}"))
    results.append(PropertyResult('identity tensor', worst_identity <= 1e-12, f"{worst_identity:.3e}"))
    return results


def tsvd_suite(seed):
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    recon, ortho, order_violation, split_err, energy_err = 0.0, 0.0, 0.0, 0.0, 0.0
    fdiag_exact = True
    for _ in range(50):
        n1, n2 = _rand_dims(rng, 16, 2)
        n3 = int(rng.integers(1, 9))
        a = Tensor3.random(n1, n2, n3, gen)
        f = tsvd(a)
        rebuilt = tprod(tprod(f.U, f.S), ttranspose(f.V))
        recon = max(recon, fnorm(rebuilt - a) / fnorm(a))
        ortho = max(
            ortho,
            _max_abs(tprod(ttranspose(f.U), f.U).slices - identity_tensor(n1, n3).slices),
            _max_abs(tprod(ttranspose(f.V), f.V).slices - identity_tensor(n2, n3).slices),
        )
        off_diagonal = f.S.slices * (1 - torch.eye(n1, n2, dtype=torch.float64))
        fdiag_exact = fdiag_exact and bool((off_diagonal == 0).all())
        sigma = f.fourier_singular_values
        if sigma.shape[1] > 1:
            increase = float((sigma[:, 1:] - sigma[:, :-1]).clamp(min=0).max())
            order_violation = max(order_violation, increase)

        oracle = slice_singular_values(a)
        for r in (1, 2, 4):
            if r > min(n1, n2):
                continue
            principal, residual = truncate_split(f, r)
            split_err = max(split_err, fnorm(reconstruct(principal) + residual - a) / fnorm(a))
            discarded = float((oracle[:, r:] ** 2).sum()) / n3
            measured = fnorm(residual) ** 2
            if discarded > 0:
                energy_err = max(energy_err, abs(measured - discarded) / discarded)
            else:
                energy_err = max(energy_err, measured / fnorm(a) ** 2)

    degenerate = 0.0
    for _ in range(10):
        n1, n2 = _rand_dims(rng, 8, 2)
        matrix = torch.randn(n1, n2, dtype=torch.float64, generator=gen)
        f = tsvd(Tensor3(matrix.unsqueeze(0)))
        expected = torch.linalg.svdvals(matrix)
        values = torch.diagonal(f.S.slices[0])
        degenerate = max(degenerate, _max_abs(values - expected))
        degenerate = max(degenerate, lorapt_pissa_gap(EncoderWeights.random(n1, 1, gen), 1))

    return [
        PropertyResult('reconstruction', recon <= 1e-9, f"max relative error {recon:.3e}"),
        PropertyResult('orthogonality of U, V', ortho <= 1e-9, f"max deviation {ortho:.3e}"),
        PropertyResult('f-diagonal S', fdiag_exact, 'off-diagonal entries exactly zero' if fdiag_exact else 'nonzero off-diagonal entry'),
        PropertyResult('singular values nonincreasing', order_violation <= 0.0, f"max increase {order_violation:.3e}"),
        PropertyResult('split identity', split_err <= 1e-9, f"max relative error {split_err:.3e}"),
        PropertyResult('residual energy', energy_err <= 1e-8, f"max relative error {energy_err:.3e}"),
        PropertyResult('n3 = 1 matches matrix SVD', degenerate <= 1e-10, f"max deviation {degenerate:.3e}"),
    ]


def lorapt_pissa_gap(weights, r):
    """
    Largest difference between LoRA-PT's w_up split (n3 = 1 for one layer)
    and PISSA's split of the same matrix.
    """
    adapter = build_lorapt(tensorize(weights), r)
    pissa = build_pissa(weights, r)
    split = adapter.w_up
    matrix_adapter = pissa.adapters['layer.1.up']
    principal_t = reconstruct(split.principal).slices[0]
    principal_m = (matrix_adapter.U * matrix_adapter.sigma) @ matrix_adapter.V.T
    return max(
        _max_abs(principal_t - principal_m),
        _max_abs(split.residual.slices[0] - matrix_adapter.frozen),
    )


def tiny_grad_case(method, rank, seed):
    """(closure, params, grads) for the tiny model under ``method``."""
    gen = torch.Generator().manual_seed(seed)
    config = ModelConfig(d=8, n_heads=2, layers=2, seq_len=4)
    weights = EncoderWeights.random(config.d, config.layers, gen)
    model = TinyEncoder(config, build_weight_source(method, weights, rank=rank, seed=seed))
    model.init_head(gen)
    with torch.no_grad():
        for name, param in trainable_parameters(model).items():
            if name.endswith('.B'):
                param.copy_(0.1 * torch.randn(param.shape, dtype=torch.float64, generator=gen))
    X = torch.randn(2, config.seq_len, config.d, dtype=torch.float64, generator=gen)
    y = torch.randn(2, config.seq_len, dtype=torch.float64, generator=gen)
    batch = (X, y)
    grads = grad_adapter(task_loss, model, batch)
    params = trainable_parameters(model)
    return (lambda: task_loss(model, batch)), params, grads


def grad_suite(seed):
    results = []
    for method, rank in (('lora-pt', 1), ('lora', 2), ('pissa', 2)):
        closure, params, grads = tiny_grad_case(method, rank, seed)
        report = finite_diff_check(closure, params, h=1e-5, grads=grads)
        results.append(PropertyResult(
            f"gradients ({method}, r={rank})",
            report.passed(GRAD_REL_TOL, GRAD_ABS_TOL),
            f"max rel-err {report.max_rel_error:.3e} over {report.coordinates} coordinates"
            f" (small-gradient abs-err {report.max_abs_error_small:.3e})",
        ))
    return results


def random_mask(rng, max_side=10, density=None):
    dims = tuple(int(s) for s in rng.integers(1, max_side + 1, size=3))
    p = rng.uniform(0.05, 0.6) if density is None else density
    return rng.random(dims) < p


def shifted_boundary(voxels):
    """Foreground voxels with a background or out-of-volume face neighbour."""
    padded = np.pad(np.asarray(voxels, dtype=bool), 1, constant_values=False)
    inner = padded[1:-1, 1:-1, 1:-1]
    exposed = np.zeros_like(inner)
    for axis in range(3):
        for step in (-1, 1):
            exposed |= ~np.roll(padded, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return inner & exposed


def brute_force_hd95(a, b):
    """All-pairs boundary distances with an explicit nearest-rank percentile."""

    def points(m):
        return np.argwhere(shifted_boundary(m.voxels)) * np.asarray(m.spacing)

    def directed(p, q):
        nearest = np.sort(cdist(p, q).min(axis=1))
        rank = math.ceil(95 * len(nearest) / 100)
        return nearest[rank - 1]

    pa, pb = points(a), points(b)
    return max(directed(pa, pb), directed(pb, pa))


def flood_fill_filter(voxels, spacing, threshold):
    """Breadth-first 26-connected component filter."""
    voxels = np.asarray(voxels, dtype=bool)
    seen = np.zeros_like(voxels)
    keep = np.zeros_like(voxels)
    volume = float(np.prod(spacing))
    offsets = [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)]
    for start in zip(*np.nonzero(voxels)):
        if seen[start]:
            continue
        component = []
        queue = deque([start])
        seen[start] = True
        while queue:
            x, y, z = queue.popleft()
            component.append((x, y, z))
            for dx, dy, dz in offsets:
                n = (x + dx, y + dy, z + dz)
                if all(0 <= n[i] < voxels.shape[i] for i in range(3)) and voxels[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
        if len(component) * volume >= threshold:
            for voxel in component:
                keep[voxel] = True
    return keep


def metrics_suite(seed):
    rng = np.random.default_rng(seed)
    dice_err, hd_err, cc_ok = 0.0, 0.0, True
    for _ in range(50):
        va = random_mask(rng)
        vb = rng.random(va.shape) < rng.uniform(0.05, 0.6)
        spacing = tuple(float(s) for s in rng.uniform(0.5, 2.0, size=3))
        a, b = Mask3D(va, spacing), Mask3D(vb, spacing)
        total = va.sum() + vb.sum()
        expected = 1.0 if total == 0 else 2.0 * np.logical_and(va, vb).sum() / total
        dice_err = max(dice_err, abs(dice(a, b) - expected))
        if va.any() and vb.any():
            hd_err = max(hd_err, abs(hd95(a, b) - brute_force_hd95(a, b)))
        threshold = float(rng.uniform(0, 20))
        filtered = remove_small_components(a, threshold)
        cc_ok = cc_ok and bool((filtered.voxels == flood_fill_filter(va, spacing, threshold)).all())

    gen = torch.Generator().manual_seed(seed)
    pred = torch.rand(2, 4, 4, 4, dtype=torch.float64, generator=gen).requires_grad_(True)
    target = (torch.rand(2, 4, 4, 4, dtype=torch.float64, generator=gen) > 0.5).to(torch.float64)
    report = finite_diff_check(lambda: dice_loss(pred, target), {'pred': pred}, h=1e-6)

    return [
        PropertyResult('dice matches counting oracle', dice_err <= 1e-12, f"max error {dice_err:.3e}"),
        PropertyResult('hd95 matches all-pairs oracle', hd_err <= 1e-9, f"max error {hd_err:.3e}"),
        PropertyResult('component filter matches flood fill', cc_ok, ''),
        PropertyResult('dice loss gradient', report.max_rel_error <= 1e-6, f"max rel-err {report.max_rel_error:.3e}"),
    ]


SUITES = {
    'tprod': tprod_suite,
    'tsvd': tsvd_suite,
    'grad': grad_suite,
    'metrics': metrics_suite,
}


def run_suite(name, seed):
    logger.info(f"running verification suite {name} with seed {seed}")
    return SUITES[name](seed)
