# Generated by Django 5.2.7

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('method', models.CharField(help_text='Adapter method (lora-pt, lora, pissa, full)', max_length=10)),
                ('rank', models.PositiveIntegerField(help_text='Adapter rank r')),
                ('params', models.BigIntegerField(default=0, help_text='Trainable adapter parameters (encoder only)')),
                ('task', models.CharField(default='regression', max_length=20)),
                ('d', models.PositiveIntegerField(help_text='Hidden dimension')),
                ('layers', models.PositiveIntegerField(help_text='Transformer layer count')),
                ('seed', models.IntegerField()),
                ('initial_loss', models.FloatField(blank=True, null=True)),
                ('final_loss', models.FloatField(blank=True, null=True)),
                ('status', models.CharField(choices=[('RUNNING', 'Running'), ('COMPLETED', 'Completed'), ('FAILED', 'Failed')], default='RUNNING', max_length=10)),
                ('config_checksum', models.CharField(blank=True, help_text='SHA-256 of the experiment config file', max_length=64)),
                ('created', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'verbose_name': 'Experiment Run',
                'verbose_name_plural': 'Experiment Runs',
                'ordering': ['created'],
                'indexes': [models.Index(fields=['method', 'rank'], name='run_method_rank_idx')],
            },
        ),
    ]
