# Generated by Django 5.2.7 on 2026-10-19 09:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('variant', models.CharField(max_length=50)),
                ('seed', models.IntegerField()),
                ('status', models.CharField(choices=[('pending', 'Pending'), ('running', 'Running'), ('finished', 'Finished'), ('failed', 'Failed')], default='pending', max_length=20)),
                ('output_dir', models.CharField(max_length=500, unique=True)),
                ('grasp_budget', models.PositiveIntegerField()),
                ('grasps_completed', models.PositiveIntegerField(default=0)),
                ('final_success', models.FloatField(blank=True, null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='EvaluationRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('grasp_index', models.PositiveIntegerField()),
                ('success_rate', models.FloatField()),
                ('standard_error', models.FloatField()),
                ('n_grasps', models.PositiveIntegerField()),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='evaluations', to='grasp_learning.trainingrun')),
            ],
            options={
                'ordering': ['run', 'grasp_index'],
                'constraints': [models.UniqueConstraint(fields=('run', 'grasp_index'), name='unique_evaluation_per_grasp')],
            },
        ),
    ]
