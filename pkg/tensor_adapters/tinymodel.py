"""
Desk-scale transformer encoder used to exercise the adapters end to end.

Block wiring is pre-LN: X <- X + MHSA(LN(X)); X <- X + MLP(LN(X)).
Attention follows the printed per-head formula, including the 1/sqrt(d)
scaling (not 1/sqrt(d / N_h)), and head i uses columns
[i*d/N_h, (i+1)*d/N_h) of every attention matrix.

Each adapter method is a weight source module that hands the encoder an
``EncoderWeights`` built from its parameters: LoRA-PT reconstructs the
three stacked tensors with t-products of its factors, so gradients reach
U_r, the diagonal tubes of S_r and V_r through the FFT path, while the
residual tensors are buffers and never train.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .adapters import (
    METHOD_FULL,
    METHOD_LORA,
    METHOD_LORA_PT,
    METHOD_PISSA,
    ROLES,
    EncoderWeights,
    LayerWeights,
    LoRAPTAdapter,
    StackedTensors,
    TensorSplit,
    build_lorapt,
    build_matrix_lora,
    build_pissa,
    detensorize,
    tensorize,
)
from .exceptions import InvalidArgumentError, NumericError
from .segmetrics import dice_loss
from .tensor3 import Tensor3
from .tsvd import LowRankFactors, reconstruct

logger = logging.getLogger(__name__)

TASK_REGRESSION = 'regression'
TASK_VOXEL = 'binary-voxel-toy'
TASKS = (TASK_REGRESSION, TASK_VOXEL)
METHOD_FROZEN = 'frozen'

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LAYER_NORM_EPS = 1e-5
FLOAT64_EPS = torch.finfo(torch.float64).eps


@dataclass(frozen=True)
class ModelConfig:
    d: int
    n_heads: int
    layers: int
    seq_len: int
    task: str = TASK_REGRESSION

    def __post_init__(self):
        if self.d < 1 or self.n_heads < 1 or self.seq_len < 1 or self.layers < 0:
            raise InvalidArgumentError(f"invalid model dimensions: {self}")
        if self.d % self.n_heads:
            raise InvalidArgumentError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.task not in TASKS:
            raise InvalidArgumentError(f"unknown task: {self.task}")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    total_iters: int = 200
    poly_power: float = 0.9
    weight_decay: float = 1e-5
    batch: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.total_iters < 1:
            raise InvalidArgumentError(f"total_iters must be positive, got {self.total_iters}")
        if self.batch < 1:
            raise InvalidArgumentError(f"batch must be positive, got {self.batch}")
        if self.lr0 < 0 or self.weight_decay < 0:
            raise InvalidArgumentError("lr0 and weight_decay must be nonnegative")

    def lr_at(self, t):
        """Poly schedule lr0 * (1 - t/T)^p."""
        return self.lr0 * (1.0 - min(t, self.total_iters) / self.total_iters) ** self.poly_power


def mhsa_forward(X, w_q, w_k, w_v, w_o, n_heads):
    """Sum over heads of softmax(X Wq_i Wk_i^T X^T / sqrt(d)) X Wv_i Wo_i^T."""
    d = X.shape[-1]
    head_dim = d // n_heads
    out = torch.zeros_like(X)
    for i in range(n_heads):
        cols = slice(i * head_dim, (i + 1) * head_dim)
        queries = X @ w_q[:, cols]
        keys = X @ w_k[:, cols]
        scores = queries @ keys.transpose(-1, -2) / math.sqrt(d)
        if bool(torch.isnan(scores.detach()).any()):
            raise NumericError(f"NaN in attention scores of head {i}")
        attention = torch.softmax(scores, dim=-1)
        out = out + attention @ (X @ w_v[:, cols]) @ w_o[:, cols].T
    return out


def mlp_forward(X, w_up, w_down):
    """GELU(X W_up) W_down with the exact (erf) GELU."""
    return F.gelu(X @ w_up) @ w_down


def _plain_layer_norm(X):
    return F.layer_norm(X, (X.shape[-1],), eps=LAYER_NORM_EPS)


def encoder_forward(X, weights, config, norms=None):
    """
    Run ``config.layers`` pre-LN blocks. ``norms`` is a sequence of
    (attention_norm, mlp_norm) callables; None means unit scale, zero shift.
    """
    layers = weights.layers if isinstance(weights, EncoderWeights) else weights
    if len(layers) != config.layers:
        raise InvalidArgumentError(f"config has {config.layers} layers, weights have {len(layers)}")
    for index, layer in enumerate(layers, 1):
        mats = layer.as_dict() if isinstance(layer, LayerWeights) else layer
        attn_norm, mlp_norm = norms[index - 1] if norms is not None else (_plain_layer_norm, _plain_layer_norm)
        try:
            X = X + mhsa_forward(attn_norm(X), mats['q'], mats['k'], mats['v'], mats['o'], config.n_heads)
            X = X + mlp_forward(mlp_norm(X), mats['up'], mats['down'])
        except NumericError as exc:
            raise NumericError(str(exc), layer=index) from exc
    return X


class FrozenWeights(nn.Module):
    """Raw encoder weights held as buffers: nothing trains."""

    method = METHOD_FROZEN

    def __init__(self, weights):
        super().__init__()
        self.d = weights.d
        self.layers = weights.L
        for name, matrix in weights.named_matrices():
            self.register_buffer(_module_key(name), matrix.detach().clone())

    def encoder_weights(self):
        return _weights_from(self, self.d, self.layers, lambda key: getattr(self, key))


class FullWeights(nn.Module):
    """Every encoder matrix is a trainable parameter."""

    method = METHOD_FULL

    def __init__(self, weights):
        super().__init__()
        self.d = weights.d
        self.layers = weights.L
        self.matrices = nn.ParameterDict({
            _module_key(name): nn.Parameter(matrix.detach().contiguous().clone())
            for name, matrix in weights.named_matrices()
        })

    def encoder_weights(self):
        return _weights_from(self, self.d, self.layers, lambda key: self.matrices[key])


def _module_key(name):
    # module and parameter names may not contain dots
    return name.replace('.', '_')


def _weights_from(source, d, L, lookup):
    layers = []
    for index in range(1, L + 1):
        layers.append(LayerWeights(**{
            role: lookup(_module_key(f"layer.{index}.{role}")) for role in ROLES
        }))
    return EncoderWeights(d=d, layers=layers)


class TensorFactors(nn.Module):
    """Trainable U_r, S_r tubes and V_r of one stacked tensor; residual frozen."""

    def __init__(self, split):
        super().__init__()
        self.U = nn.Parameter(split.principal.U.slices.detach().contiguous().clone())
        self.S_tubes = nn.Parameter(split.principal.s_tubes.detach().contiguous().clone())
        self.V = nn.Parameter(split.principal.V.slices.detach().contiguous().clone())
        self.register_buffer('residual', split.residual.slices.detach().clone())

    def principal(self):
        return LowRankFactors.from_tubes(Tensor3(self.U), self.S_tubes, Tensor3(self.V))

    def effective(self):
        return Tensor3(self.residual) + reconstruct(self.principal())

    def to_split(self):
        principal = LowRankFactors.from_tubes(
            Tensor3(self.U.detach().clone()), self.S_tubes.detach().clone(), Tensor3(self.V.detach().clone())
        )
        return TensorSplit(principal=principal, residual=Tensor3(self.residual.clone()))


class LoRAPTWeights(nn.Module):
    """LoRA-PT weight source built from a ``LoRAPTAdapter``."""

    method = METHOD_LORA_PT

    def __init__(self, adapter):
        super().__init__()
        self.rank = adapter.rank
        self.d = adapter.d
        self.layers = adapter.layers
        self.stack_order = adapter.stack_order
        self.extras = dict(adapter.extras)
        self.factors = nn.ModuleDict({
            name: TensorFactors(split) for name, split in adapter.splits().items()
        })

    def stacked(self):
        return StackedTensors(
            stack_order=self.stack_order,
            extras=self.extras,
            **{name: factors.effective() for name, factors in self.factors.items()},
        )

    def encoder_weights(self):
        return detensorize(self.stacked())

    def to_adapter(self):
        """Snapshot of the current (possibly trained) factors."""
        splits = {name: factors.to_split() for name, factors in self.factors.items()}
        return LoRAPTAdapter(
            rank=self.rank, d=self.d, layers=self.layers, stack_order=self.stack_order,
            extras=dict(self.extras), **splits,
        )


class MatrixFactors(nn.Module):
    def __init__(self, adapter):
        super().__init__()
        self.method = adapter.method
        for name, tensor in adapter.trainable().items():
            self.register_parameter(name, nn.Parameter(tensor.detach().contiguous().clone()))
        self.register_buffer('frozen', adapter.frozen.detach().clone())

    def effective(self):
        if self.method == METHOD_LORA:
            return self.frozen + self.A @ self.B
        return self.frozen + (self.U * self.sigma) @ self.V.T


class MatrixAdapterWeights(nn.Module):
    """LoRA or PISSA weight source over every encoder matrix."""

    def __init__(self, adapter_set):
        super().__init__()
        self.method = adapter_set.method
        self.rank = adapter_set.rank
        self.d = adapter_set.d
        self.layers = adapter_set.layers
        self.matrices = nn.ModuleDict({
            _module_key(name): MatrixFactors(adapter) for name, adapter in adapter_set.adapters.items()
        })

    def encoder_weights(self):
        return _weights_from(self, self.d, self.layers, lambda key: self.matrices[key].effective())


def build_weight_source(method, weights, rank=None, seed=0):
    """Wrap raw encoder weights in the weight source for ``method``."""
    if method == METHOD_FROZEN:
        return FrozenWeights(weights)
    if method == METHOD_FULL:
        return FullWeights(weights)
    if method == METHOD_LORA_PT:
        return LoRAPTWeights(build_lorapt(tensorize(weights), rank))
    if method == METHOD_LORA:
        return MatrixAdapterWeights(build_matrix_lora(weights, rank, seed))
    if method == METHOD_PISSA:
        return MatrixAdapterWeights(build_pissa(weights, rank))
    raise InvalidArgumentError(f"unknown method: {method}")


class EncoderBlockNorms(nn.Module):
    def __init__(self, d):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d, eps=LAYER_NORM_EPS, dtype=torch.float64)
        self.mlp_norm = nn.LayerNorm(d, eps=LAYER_NORM_EPS, dtype=torch.float64)


class TinyEncoder(nn.Module):
    """
    Encoder plus a per-token linear head. Layer norms and the head are
    always trainable; encoder matrices train as the weight source allows.
    """

    def __init__(self, config, weight_source):
        super().__init__()
        self.config = config
        self.weight_source = weight_source
        self.norms = nn.ModuleList(EncoderBlockNorms(config.d) for _ in range(config.layers))
        self.head = nn.Linear(config.d, 1, dtype=torch.float64)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def init_head(self, generator):
        with torch.no_grad():
            self.head.weight.copy_(
                torch.randn(1, self.config.d, dtype=torch.float64, generator=generator) / math.sqrt(self.config.d)
            )

    def encode(self, X):
        norms = [(block.attn_norm, block.mlp_norm) for block in self.norms]
        return encoder_forward(X, self.weight_source.encoder_weights(), self.config, norms)

    def forward(self, X):
        return self.head(self.encode(X)).squeeze(-1)


def task_loss(model, batch):
    """MSE for regression, Dice loss on sigmoid probabilities for the voxel task."""
    X, y = batch
    output = model(X)
    if model.config.task == TASK_VOXEL:
        return dice_loss(torch.sigmoid(output), y)
    return F.mse_loss(output, y)


def trainable_parameters(model):
    return OrderedDict((name, p) for name, p in model.named_parameters() if p.requires_grad)


def grad_adapter(loss_fn, model, batch):
    """Reverse-mode gradients of ``loss_fn(model, batch)`` for every trainable parameter."""
    params = trainable_parameters(model)
    loss = loss_fn(model, batch)
    if not bool(torch.isfinite(loss.detach())):
        raise NumericError(f"non-finite loss {float(loss)}")
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return OrderedDict(
        (name, torch.zeros_like(p) if g is None else g)
        for (name, p), g in zip(params.items(), grads)
    )


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    max_abs_error_small: float
    coordinates: int
    worst: str = ''

    def passed(self, rel_tol=1e-5, abs_tol=1e-8):
        return self.max_rel_error <= rel_tol and self.max_abs_error_small <= abs_tol


def finite_diff_check(closure, params, h=1e-5, grads=None, small=1e-8):
    """
    Compare analytic gradients against central differences
    (f(x+h) - f(x-h)) / 2h, coordinate by coordinate.

    ``closure()`` returns the scalar loss; ``params`` maps names to leaf
    tensors. Coordinates whose gradient magnitude is below ``small`` are
    compared absolutely. A discrepancy no larger than the float64 resolution
    of the quotient, eps * (|f(x+h)| + |f(x-h)|) / 2h, counts as agreement. Returns a
    FiniteDiffReport whose ``max_rel_error`` is the worst relative discrepancy.
    """
    if h <= 0:
        raise InvalidArgumentError(f"step must be positive, got {h}")
    names = list(params)
    if grads is None:
        loss = closure()
        computed = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
        grads = {
            n: torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, computed)
        }
    report = FiniteDiffReport(max_rel_error=0.0, max_abs_error_small=0.0, coordinates=0)
    with torch.no_grad():
        for name in names:
            flat = params[name].view(-1)
            analytic = grads[name].detach().reshape(-1)
            for index in range(flat.numel()):
                original = flat[index].item()
                flat[index] = original + h
                f_plus = float(closure())
                flat[index] = original - h
                f_minus = float(closure())
                flat[index] = original
                numeric = (f_plus - f_minus) / (2.0 * h)
                exact = float(analytic[index])
                error = abs(exact - numeric)
                scale = max(abs(exact), abs(numeric))
                resolution = FLOAT64_EPS * (abs(f_plus) + abs(f_minus)) / (2.0 * h)
                report.coordinates += 1
                if scale < small:
                    report.max_abs_error_small = max(report.max_abs_error_small, error)
                elif error > resolution and error / scale > report.max_rel_error:
                    report.max_rel_error = error / scale
                    report.worst = f"{name}[{index}]"
    return report


class Trainer:
    """AdamW (decoupled weight decay) with the poly learning-rate schedule."""

    def __init__(self, model, train_config, loss_fn=task_loss):
        self.model = model
        self.config = train_config
        self.loss_fn = loss_fn
        self.iteration = 0
        params = list(trainable_parameters(model).values())
        self.optimizer = torch.optim.AdamW(
            params,
            lr=train_config.lr0,
            betas=ADAM_BETAS,
            eps=ADAM_EPS,
            weight_decay=train_config.weight_decay,
        )
        self.scheduler = torch.optim.lr_scheduler.PolynomialLR(
            self.optimizer, total_iters=train_config.total_iters, power=train_config.poly_power
        )

    @property
    def lr(self):
        return self.optimizer.param_groups[0]['lr']


def train_step(trainer, batch, t):
    """One optimizer step at iteration t; returns the pre-step loss."""
    if t >= trainer.config.total_iters:
        raise InvalidArgumentError(f"iteration {t} is past total_iters={trainer.config.total_iters}")
    if t != trainer.iteration:
        raise InvalidArgumentError(f"expected iteration {trainer.iteration}, got {t}")
    trainer.optimizer.zero_grad()
    loss = trainer.loss_fn(trainer.model, batch)
    if not bool(torch.isfinite(loss.detach())):
        raise NumericError(f"non-finite loss at iteration {t}")
    loss.backward()
    trainer.optimizer.step()
    trainer.scheduler.step()
    trainer.iteration += 1
    logger.debug(f"step {t}: loss {float(loss):.6e}, next lr {trainer.lr:.3e}")
    return float(loss)
