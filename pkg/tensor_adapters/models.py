"""
Records of toy fine-tuning runs.
"""

from django.db import models


class ExperimentRun(models.Model):
    """
    One training run of the toy encoder under an adapter method and rank.

    Rows are written by the ``train_toy`` and ``rank_sweep`` commands; the
    config checksum ties a row to the exact configuration file used.
    """

    STATUS_CHOICES = [
        ('RUNNING', 'Running'),
        ('COMPLETED', 'Completed'),
        ('FAILED', 'Failed'),
    ]

    method = models.CharField(
        max_length=10,
        help_text="Adapter method (lora-pt, lora, pissa, full)"
    )
    rank = models.PositiveIntegerField(help_text="Adapter rank r")
    params = models.BigIntegerField(
        default=0,
        help_text="Trainable adapter parameters (encoder only)"
    )
    task = models.CharField(max_length=20, default='regression')
    d = models.PositiveIntegerField(help_text="Hidden dimension")
    layers = models.PositiveIntegerField(help_text="Transformer layer count")
    seed = models.IntegerField()
    initial_loss = models.FloatField(null=True, blank=True)
    final_loss = models.FloatField(null=True, blank=True)
    status = models.CharField(max_length=10, choices=STATUS_CHOICES, default='RUNNING')
    config_checksum = models.CharField(
        max_length=64,
        blank=True,
        help_text="SHA-256 of the experiment config file"
    )
    created = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['created']
        indexes = [
            models.Index(fields=['method', 'rank'], name='run_method_rank_idx'),
        ]
        verbose_name = "Experiment Run"
        verbose_name_plural = "Experiment Runs"

    def __str__(self):
        return f"{self.method} r={self.rank} seed={self.seed} ({self.status})"
