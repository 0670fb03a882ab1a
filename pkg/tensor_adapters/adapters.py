"""
Encoder weights, their tensorization, and the adapter methods.

Tensorization follows the layer-major stacking: the self-attention tensor
w_sa (d x d x 4L) holds (W_q, W_k, W_v, W_o) of layer 1, then of layer 2,
and so on; w_up (d x 4d x L) and w_down (4d x d x L) hold one MLP matrix per
layer. The stack order is recorded as a tag so stored decompositions are
self-describing.

Adapter methods:

- ``lora-pt``: t-SVD of each stacked tensor, principal rank-r factors
  trainable, residual tensor frozen.
- ``lora``: per-matrix W + A.B with B initialized to zero.
- ``pissa``: per-matrix SVD split, principal factors trainable, residual frozen.
- ``full``: every encoder matrix trainable (reference point for counts).

Biases are never adapted and never counted; they travel as opaque
``extras`` keyed by their checkpoint name ``layer.{l}.{name}``.
"""

import logging
import math
from dataclasses import dataclass, field

import torch

from .exceptions import DecompositionError, InvalidArgumentError
from .tensor3 import Tensor3
from .tsvd import LowRankFactors, reconstruct, truncate_split, tsvd

logger = logging.getLogger(__name__)

ATTENTION_ROLES = ('q', 'k', 'v', 'o')
MLP_ROLES = ('up', 'down')
ROLES = ATTENTION_ROLES + MLP_ROLES
STACK_NAMES = ('w_sa', 'w_up', 'w_down')
STACK_ORDER_LAYER_MAJOR = 'layer-major-qkvo'
STACK_ORDERS = (STACK_ORDER_LAYER_MAJOR,)

METHOD_LORA_PT = 'lora-pt'
METHOD_LORA = 'lora'
METHOD_PISSA = 'pissa'
METHOD_FULL = 'full'
METHODS = (METHOD_LORA_PT, METHOD_LORA, METHOD_PISSA, METHOD_FULL)


def role_shape(role, d):
    """Shape of an encoder matrix by role."""
    if role in ATTENTION_ROLES:
        return (d, d)
    if role == 'up':
        return (d, 4 * d)
    if role == 'down':
        return (4 * d, d)
    raise InvalidArgumentError(f"unknown matrix role: {role}")


@dataclass
class LayerWeights:
    """One transformer block's adaptable matrices plus opaque extras (biases)."""

    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    o: torch.Tensor
    up: torch.Tensor
    down: torch.Tensor
    extras: dict = field(default_factory=dict)

    def matrix(self, role):
        return getattr(self, role)

    def as_dict(self):
        return {role: getattr(self, role) for role in ROLES}


@dataclass
class EncoderWeights:
    """Per-layer encoder matrices; layers are numbered 1..L in checkpoints."""

    d: int
    layers: list

    def __post_init__(self):
        for index, layer in enumerate(self.layers, 1):
            for role in ROLES:
                matrix = layer.matrix(role)
                expected = role_shape(role, self.d)
                if tuple(matrix.shape) != expected:
                    raise InvalidArgumentError(
                        f"layer {index} {role}: shape {tuple(matrix.shape)}, expected {expected}"
                    )
                if not bool(torch.isfinite(matrix.detach()).all()):
                    raise InvalidArgumentError(f"layer {index} {role}: non-finite entries")

    @property
    def L(self):
        return len(self.layers)

    def named_matrices(self):
        """Yield (name, matrix) in checkpoint naming: ``layer.{l}.{role}``."""
        for index, layer in enumerate(self.layers, 1):
            for role in ROLES:
                yield f"layer.{index}.{role}", layer.matrix(role)

    @classmethod
    def random(cls, d, L, generator=None, correlation=0.0):
        """
        Seeded synthetic weights. With ``correlation`` c in [0, 1], every
        layer's matrix is sqrt(c) * shared + sqrt(1 - c) * own, so stacked
        tensors become tubally low-rank as c approaches 1.
        """
        if not 0.0 <= correlation <= 1.0:
            raise InvalidArgumentError(f"correlation must be in [0, 1], got {correlation}")
        shared = {
            role: _gaussian(role_shape(role, d), d, generator) for role in ROLES
        }
        layers = []
        for _ in range(L):
            matrices = {}
            for role in ROLES:
                own = _gaussian(role_shape(role, d), d, generator)
                matrices[role] = math.sqrt(correlation) * shared[role] + math.sqrt(1.0 - correlation) * own
            layers.append(LayerWeights(**matrices))
        return cls(d=d, layers=layers)


def _gaussian(shape, d, generator):
    return torch.randn(*shape, dtype=torch.float64, generator=generator) / math.sqrt(d)


@dataclass(frozen=True)
class StackedTensors:
    """The three tensors built from an encoder's matrices."""

    w_sa: Tensor3
    w_up: Tensor3
    w_down: Tensor3
    stack_order: str = STACK_ORDER_LAYER_MAJOR
    extras: dict = field(default_factory=dict)

    def named(self):
        return {'w_sa': self.w_sa, 'w_up': self.w_up, 'w_down': self.w_down}


def split_layer_name(name):
    """'layer.3.q_bias' -> (3, 'q_bias'); None for names outside that pattern."""
    parts = name.split('.', 2)
    if len(parts) == 3 and parts[0] == 'layer' and parts[1].isdigit() and parts[2]:
        return int(parts[1]), parts[2]
    return None


def layer_extras(w):
    """Opaque per-layer arrays keyed by their checkpoint name ``layer.{l}.{name}``."""
    return {
        f"layer.{index}.{name}": tensor
        for index, layer in enumerate(w.layers, 1)
        for name, tensor in layer.extras.items()
    }


def distribute_extras(extras, L):
    """Inverse of ``layer_extras``: one dict of opaque arrays per layer."""
    per_layer = [{} for _ in range(L)]
    for name, tensor in extras.items():
        parsed = split_layer_name(name)
        if parsed is None or not 1 <= parsed[0] <= L or parsed[1] in ROLES:
            raise InvalidArgumentError(f"opaque array {name} does not belong to a layer 1..{L}")
        per_layer[parsed[0] - 1][parsed[1]] = tensor
    return per_layer


def tensorize(w):
    """Stack an encoder's matrices into (w_sa, w_up, w_down); biases ride along untouched."""
    if w.L == 0:
        raise InvalidArgumentError("cannot tensorize an encoder with no layers")
    attention = []
    for layer in w.layers:
        attention.extend(layer.matrix(role) for role in ATTENTION_ROLES)
    stacked = StackedTensors(
        w_sa=Tensor3(torch.stack(attention)),
        w_up=Tensor3(torch.stack([layer.up for layer in w.layers])),
        w_down=Tensor3(torch.stack([layer.down for layer in w.layers])),
        stack_order=STACK_ORDER_LAYER_MAJOR,
        extras=layer_extras(w),
    )
    logger.debug(
        f"tensorized L={w.L} d={w.d}: w_sa {stacked.w_sa}, w_up {stacked.w_up}, w_down {stacked.w_down}"
    )
    return stacked


def detensorize(s):
    """Exact inverse of ``tensorize``."""
    if s.stack_order not in STACK_ORDERS:
        raise InvalidArgumentError(f"unknown stack order: {s.stack_order}")
    n_attention = s.w_sa.n3
    if n_attention % 4:
        raise InvalidArgumentError(f"w_sa has {n_attention} slices, not a multiple of 4")
    L = n_attention // 4
    if s.w_up.n3 != L or s.w_down.n3 != L:
        raise InvalidArgumentError(
            f"w_sa implies {L} layers but w_up has {s.w_up.n3} and w_down {s.w_down.n3}"
        )
    d = s.w_sa.n1
    extras = distribute_extras(s.extras, L)
    layers = []
    for index in range(L):
        matrices = {
            role: s.w_sa.slices[4 * index + offset]
            for offset, role in enumerate(ATTENTION_ROLES)
        }
        matrices['up'] = s.w_up.slices[index]
        matrices['down'] = s.w_down.slices[index]
        layers.append(LayerWeights(extras=extras[index], **matrices))
    return EncoderWeights(d=d, layers=layers)


@dataclass(frozen=True)
class TensorSplit:
    """Principal factors of one stacked tensor plus its frozen residual."""

    principal: LowRankFactors
    residual: Tensor3

    def effective(self):
        return self.residual + reconstruct(self.principal)


@dataclass(frozen=True)
class LoRAPTAdapter:
    """LoRA-PT adapter over the three stacked tensors."""

    w_sa: TensorSplit
    w_up: TensorSplit
    w_down: TensorSplit
    rank: int
    d: int
    layers: int
    stack_order: str = STACK_ORDER_LAYER_MAJOR
    extras: dict = field(default_factory=dict)

    def splits(self):
        return {'w_sa': self.w_sa, 'w_up': self.w_up, 'w_down': self.w_down}

    def stored_arrays(self):
        """Trainable arrays by container name: U, S_tubes and V per tensor."""
        arrays = {}
        for name, split in self.splits().items():
            arrays[f"{name}.U"] = split.principal.U.slices
            arrays[f"{name}.S_tubes"] = split.principal.s_tubes
            arrays[f"{name}.V"] = split.principal.V.slices
        return arrays

    def trainable_parameter_count(self):
        return sum(array.numel() for array in self.stored_arrays().values())


def build_lorapt(s, r):
    """t-SVD each stacked tensor and split it at rank r."""
    d = s.w_sa.n1
    if r < 1 or r > d:
        raise InvalidArgumentError(f"rank {r} out of range 1..{d}")
    splits = {}
    for name, tensor in s.named().items():
        logger.info(f"decomposing {name} {tensor} at rank {r}")
        try:
            principal, residual = truncate_split(tsvd(tensor), r)
        except DecompositionError as exc:
            raise exc.with_tensor(name) from exc
        splits[name] = TensorSplit(principal=principal, residual=residual)
    return LoRAPTAdapter(
        rank=r, d=d, layers=s.w_up.n3, stack_order=s.stack_order, extras=dict(s.extras), **splits
    )


def effective_weights(a):
    """residual + reconstruct(principal) for every stacked tensor, detensorized."""
    stacked = StackedTensors(
        w_sa=a.w_sa.effective(),
        w_up=a.w_up.effective(),
        w_down=a.w_down.effective(),
        stack_order=a.stack_order,
        extras=a.extras,
    )
    return detensorize(stacked)


def param_count(method, d, L, r):
    """
    Trainable adapter parameters (encoder only, biases excluded).

    lora-pt: 4L.r.(2d+1) + 2L.r.(5d+1)
    lora:    4L.2dr + 2L.5dr
    pissa:   4L.(2d+1).r + 2L.(5d+1).r
    full:    12.L.d^2 (independent of r)
    """
    if r < 1:
        raise InvalidArgumentError(f"rank must be >= 1, got {r}")
    if d < 1 or L < 1:
        raise InvalidArgumentError(f"d and L must be >= 1, got d={d}, L={L}")
    if method == METHOD_LORA_PT:
        return 4 * L * r * (2 * d + 1) + 2 * L * r * (5 * d + 1)
    if method == METHOD_LORA:
        return 4 * L * 2 * d * r + 2 * L * 5 * d * r
    if method == METHOD_PISSA:
        return 4 * L * (2 * d + 1) * r + 2 * L * (5 * d + 1) * r
    if method == METHOD_FULL:
        return 12 * L * d * d
    raise InvalidArgumentError(f"unknown method: {method}")


def adapter_array_shapes(method, d, L, r):
    """
    Shapes of every trainable array a method stores, keyed by array name.
    Summing their sizes gives ``param_count`` without building anything.
    """
    if method == METHOD_LORA_PT:
        depths = {'w_sa': (d, d, 4 * L), 'w_up': (d, 4 * d, L), 'w_down': (4 * d, d, L)}
        shapes = {}
        for name, (n1, n2, n3) in depths.items():
            shapes[f"{name}.U"] = (n3, n1, r)
            shapes[f"{name}.S_tubes"] = (r, n3)
            shapes[f"{name}.V"] = (n3, n2, r)
        return shapes
    shapes = {}
    for index in range(1, L + 1):
        for role in ROLES:
            m, n = role_shape(role, d)
            prefix = f"layer.{index}.{role}"
            if method == METHOD_LORA:
                shapes[f"{prefix}.A"] = (m, r)
                shapes[f"{prefix}.B"] = (r, n)
            elif method == METHOD_PISSA:
                shapes[f"{prefix}.U"] = (m, r)
                shapes[f"{prefix}.sigma"] = (r,)
                shapes[f"{prefix}.V"] = (n, r)
            elif method == METHOD_FULL:
                shapes[prefix] = (m, n)
            else:
                raise InvalidArgumentError(f"unknown method: {method}")
    return shapes


@dataclass
class MatrixAdapter:
    """
    Adapter on a single m x n matrix.

    lora:  W_eff = base + A @ B
    pissa: W_eff = residual + U @ diag(sigma) @ V^T
    """

    method: str
    rank: int
    frozen: torch.Tensor
    A: torch.Tensor = None
    B: torch.Tensor = None
    U: torch.Tensor = None
    sigma: torch.Tensor = None
    V: torch.Tensor = None

    def trainable(self):
        if self.method == METHOD_LORA:
            return {'A': self.A, 'B': self.B}
        return {'U': self.U, 'sigma': self.sigma, 'V': self.V}

    def effective(self):
        if self.method == METHOD_LORA:
            return self.frozen + self.A @ self.B
        return self.frozen + (self.U * self.sigma) @ self.V.T


@dataclass
class MatrixAdapterSet:
    """One MatrixAdapter per encoder matrix, keyed ``layer.{l}.{role}``."""

    method: str
    rank: int
    d: int
    layers: int
    adapters: dict
    extras: dict = field(default_factory=dict)

    def trainable_parameter_count(self):
        return sum(
            tensor.numel()
            for adapter in self.adapters.values()
            for tensor in adapter.trainable().values()
        )

    def effective_weights(self):
        extras = distribute_extras(self.extras, self.layers)
        layers = []
        for index in range(1, self.layers + 1):
            matrices = {
                role: self.adapters[f"layer.{index}.{role}"].effective() for role in ROLES
            }
            layers.append(LayerWeights(extras=extras[index - 1], **matrices))
        return EncoderWeights(d=self.d, layers=layers)


def build_matrix_lora(w, r, seed):
    """LoRA on every encoder matrix: A ~ N(0, 1/r), B = 0."""
    if r < 1 or r > w.d:
        raise InvalidArgumentError(f"rank {r} out of range 1..{w.d}")
    generator = torch.Generator().manual_seed(seed)
    adapters = {}
    for name, matrix in w.named_matrices():
        m, n = matrix.shape
        adapters[name] = MatrixAdapter(
            method=METHOD_LORA,
            rank=r,
            frozen=matrix.detach().clone(),
            A=torch.randn(m, r, dtype=torch.float64, generator=generator) / math.sqrt(r),
            B=torch.zeros(r, n, dtype=torch.float64),
        )
    return MatrixAdapterSet(method=METHOD_LORA, rank=r, d=w.d, layers=w.L, adapters=adapters, extras=layer_extras(w))


def pissa_split(matrix, r):
    """Best rank-r SVD factors of ``matrix`` and the residual left over."""
    try:
        u, s, vh = torch.linalg.svd(matrix.detach(), full_matrices=False)
    except torch.linalg.LinAlgError as exc:
        raise DecompositionError(f"matrix SVD did not converge: {exc}") from exc
    U, sigma, V = u[:, :r].clone(), s[:r].clone(), vh[:r].T.clone()
    residual = matrix.detach() - (U * sigma) @ V.T
    return U, sigma, V, residual


def build_pissa(w, r):
    """PISSA on every encoder matrix."""
    if r < 1 or r > w.d:
        raise InvalidArgumentError(f"rank {r} out of range 1..{w.d}")
    adapters = {}
    for name, matrix in w.named_matrices():
        try:
            U, sigma, V, residual = pissa_split(matrix, r)
        except DecompositionError as exc:
            raise DecompositionError(str(exc), tensor_name=name) from exc
        adapters[name] = MatrixAdapter(
            method=METHOD_PISSA, rank=r, frozen=residual, U=U, sigma=sigma, V=V
        )
    return MatrixAdapterSet(method=METHOD_PISSA, rank=r, d=w.d, layers=w.L, adapters=adapters, extras=layer_extras(w))
