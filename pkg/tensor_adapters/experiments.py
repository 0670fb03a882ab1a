"""
Toy fine-tuning experiments standing in for the segmentation transfer task.

A seeded "pre-trained" encoder (correlated layers) is the starting point.
The task's targets come from a frozen copy whose stacked tensors carry an
extra low-tubal-rank perturbation, read out by a random head. The model
under training starts from the pre-trained weights with a zero head and
adapts through the chosen method. Losses are measured on a fixed
evaluation batch before and after training.
"""

import csv
import logging
from dataclasses import dataclass, field, replace

import torch
from django.db import DatabaseError

from .adapters import EncoderWeights, StackedTensors, detensorize, param_count, tensorize
from .exceptions import NumericError, TensorAdapterError
from .models import ExperimentRun
from .tensor3 import Tensor3, fnorm, tprod, ttranspose
from .tinymodel import (
    TASK_VOXEL,
    FrozenWeights,
    TinyEncoder,
    Trainer,
    build_weight_source,
    task_loss,
    train_step,
)

logger = logging.getLogger(__name__)

EVAL_BATCH = 32
PRETRAINED_CORRELATION = 0.5
CSV_COLUMNS = ('method', 'rank', 'params', 'final_loss', 'seed')


def perturb_low_rank(weights, rank, scale, generator):
    """Add a tubal-rank-``rank`` tensor of relative size ``scale`` to every stacked tensor."""
    stacked = tensorize(weights)
    shifted = {}
    for name, tensor in stacked.named().items():
        u = Tensor3.random(tensor.n1, rank, tensor.n3, generator)
        v = Tensor3.random(tensor.n2, rank, tensor.n3, generator)
        delta = tprod(u, ttranspose(v))
        factor = scale * fnorm(tensor) / fnorm(delta)
        shifted[name] = Tensor3(tensor.slices + factor * delta.slices)
    return detensorize(StackedTensors(stack_order=stacked.stack_order, extras=stacked.extras, **shifted))


class ToyTask:
    """Seeded synthetic data source for one experiment configuration."""

    def __init__(self, config):
        self.config = config
        model = config.model
        seed = config.train.seed
        generator = torch.Generator().manual_seed(seed)
        self.pretrained = EncoderWeights.random(
            model.d, model.layers, generator, correlation=PRETRAINED_CORRELATION
        )
        target_weights = perturb_low_rank(
            self.pretrained, min(config.target_rank, model.d), config.target_scale, generator
        )
        self.target = TinyEncoder(model, FrozenWeights(target_weights))
        self.target.init_head(generator)
        self.target.requires_grad_(False)
        self.data_generator = torch.Generator().manual_seed(seed + 1)
        self.eval_batch = self.sample(EVAL_BATCH, torch.Generator().manual_seed(seed + 2))

    def sample(self, size, generator=None):
        model = self.config.model
        X = torch.randn(
            size, model.seq_len, model.d, dtype=torch.float64,
            generator=generator or self.data_generator,
        )
        with torch.no_grad():
            y = self.target(X)
        if model.task == TASK_VOXEL:
            y = (y > 0).to(torch.float64)
        return X, y


@dataclass
class ExperimentResult:
    method: str
    rank: int
    params: int
    seed: int
    task: str
    initial_loss: float
    final_loss: float
    losses: list = field(default_factory=list)
    model: object = None

    def csv_row(self):
        return [self.method, self.rank, self.params, f"{self.final_loss:.10g}", self.seed]


def adapter_parameter_count(weight_source):
    return sum(p.numel() for p in weight_source.parameters() if p.requires_grad)


def build_model(config, task):
    source = build_weight_source(
        config.method, task.pretrained, rank=config.rank, seed=config.train.seed
    )
    return TinyEncoder(config.model, source)


def evaluate(model, batch):
    with torch.no_grad():
        return float(task_loss(model, batch))


def run_toy_experiment(config):
    """Train the toy model under ``config``; returns an ExperimentResult."""
    task = ToyTask(config)
    model = build_model(config, task)
    params = adapter_parameter_count(model.weight_source)
    expected = param_count(config.method, config.model.d, config.model.layers, config.rank)
    if params != expected:
        raise TensorAdapterError(f"{config.method}: {params} trainable adapter parameters, formula gives {expected}")

    trainer = Trainer(model, config.train)
    initial = evaluate(model, task.eval_batch)
    logger.info(
        f"training {config.method} r={config.rank} ({params} params) for "
        f"{config.train.total_iters} steps, initial loss {initial:.6e}"
    )
    losses = []
    for t in range(config.train.total_iters):
        losses.append(train_step(trainer, task.sample(config.train.batch), t))
    final = evaluate(model, task.eval_batch)
    if not torch.isfinite(torch.tensor(final)):
        raise NumericError(f"non-finite final loss for {config.method} r={config.rank}")
    logger.info(f"{config.method} r={config.rank}: final loss {final:.6e}")
    return ExperimentResult(
        method=config.method,
        rank=config.rank,
        params=params,
        seed=config.train.seed,
        task=config.model.task,
        initial_loss=initial,
        final_loss=final,
        losses=losses,
        model=model,
    )


def rank_sweep(config, ranks, methods=None):
    """Run every (method, rank) pair in order."""
    results = []
    for method in methods or [config.method]:
        for rank in ranks:
            results.append(run_toy_experiment(replace(config, method=method, rank=rank)))
    return results


def write_sweep_csv(results, stream):
    writer = csv.writer(stream, lineterminator='\n')
    writer.writerow(CSV_COLUMNS)
    for result in results:
        writer.writerow(result.csv_row())


def record_run(config, result=None, status='COMPLETED'):
    """Store an ExperimentRun row; a missing table only logs a warning."""
    try:
        return ExperimentRun.objects.create(
            method=config.method,
            rank=config.rank,
            params=param_count(config.method, config.model.d, config.model.layers, config.rank),
            task=config.model.task,
            d=config.model.d,
            layers=config.model.layers,
            seed=config.train.seed,
            initial_loss=result.initial_loss if result else None,
            final_loss=result.final_loss if result else None,
            status=status,
            config_checksum=config.checksum,
        )
    except DatabaseError as e:
        logger.warning(f"Run not recorded (is the database migrated?): {str(e)}")
        return None
