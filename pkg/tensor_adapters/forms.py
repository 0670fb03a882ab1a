"""
Experiment configuration files: ``key = value`` lines validated with a
Django form into ModelConfig / TrainConfig.
"""

import hashlib
import logging
from dataclasses import dataclass

from django import forms

from .adapters import METHODS, param_count
from .conf import get_setting
from .exceptions import ConfigError
from .tinymodel import TASKS, ModelConfig, TrainConfig

logger = logging.getLogger(__name__)


class ExperimentConfigForm(forms.Form):
    d = forms.IntegerField(min_value=1)
    n_heads = forms.IntegerField(required=False, min_value=1)
    layers = forms.IntegerField(min_value=1)
    seq_len = forms.IntegerField(min_value=1)
    rank = forms.IntegerField(min_value=1)
    method = forms.ChoiceField(choices=[(m, m) for m in METHODS])
    lr0 = forms.FloatField(min_value=0.0)
    total_iters = forms.IntegerField(min_value=1)
    batch = forms.IntegerField(min_value=1)
    seed = forms.IntegerField()
    task = forms.ChoiceField(choices=[(t, t) for t in TASKS])
    poly_power = forms.FloatField(required=False, min_value=0.0)
    weight_decay = forms.FloatField(required=False, min_value=0.0)
    target_rank = forms.IntegerField(required=False, min_value=1)
    target_scale = forms.FloatField(required=False, min_value=0.0)

    def clean(self):
        cleaned = super().clean()
        if cleaned.get('n_heads') is None and 'n_heads' not in self.errors:
            cleaned['n_heads'] = get_setting('DEFAULT_HEADS')
        d, heads, rank = cleaned.get('d'), cleaned.get('n_heads'), cleaned.get('rank')
        if d and heads and d % heads:
            raise forms.ValidationError(f"d={d} is not divisible by n_heads={heads}")
        if d and rank and rank > d:
            raise forms.ValidationError(f"rank {rank} exceeds d={d}")
        if d and cleaned.get('target_rank') and cleaned['target_rank'] > d:
            raise forms.ValidationError(f"target_rank exceeds d={d}")
        return cleaned


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    method: str
    rank: int
    target_rank: int = 1
    target_scale: float = 0.5
    checksum: str = ''

    @property
    def params(self):
        return param_count(self.method, self.model.d, self.model.layers, self.rank)


def parse_key_values(text):
    """Split ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    for line_num, line in enumerate(text.splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"line {line_num}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        if key in values:
            raise ConfigError(f"line {line_num}: duplicate key {key!r}")
        values[key] = value
    return values


def build_experiment_config(values, checksum=''):
    unknown = sorted(set(values) - set(ExperimentConfigForm.base_fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    form = ExperimentConfigForm(data=values)
    if not form.is_valid():
        errors = '; '.join(
            f"{field}: {' '.join(messages)}" for field, messages in form.errors.items()
        )
        raise ConfigError(f"invalid config: {errors}")
    data = form.cleaned_data
    model = ModelConfig(
        d=data['d'], n_heads=data['n_heads'], layers=data['layers'],
        seq_len=data['seq_len'], task=data['task'],
    )
    train = TrainConfig(
        lr0=data['lr0'],
        total_iters=data['total_iters'],
        poly_power=data['poly_power'] if data['poly_power'] is not None else 0.9,
        weight_decay=data['weight_decay'] if data['weight_decay'] is not None else 1e-5,
        batch=data['batch'],
        seed=data['seed'],
    )
    return ExperimentConfig(
        model=model,
        train=train,
        method=data['method'],
        rank=data['rank'],
        target_rank=data['target_rank'] or 1,
        target_scale=data['target_scale'] if data['target_scale'] is not None else 0.5,
        checksum=checksum,
    )


def load_experiment_config(path):
    """Read, checksum and validate a config file."""
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    checksum = hashlib.sha256(raw).hexdigest()
    try:
        text = raw.decode('utf-8')
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config {path} is not UTF-8") from exc
    logger.info(f"loading experiment config {path} (sha256 {checksum[:12]})")
    return build_experiment_config(parse_key_values(text), checksum)
