# Generated by Django 5.2 on 2026-10-19 09:00

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
                ('name', models.CharField(max_length=200)),
                ('mode', models.CharField(choices=[('static', 'Static'), ('dynamic', 'Dynamic')], default='static', max_length=10)),
                ('seed', models.IntegerField(default=0)),
                ('config', models.JSONField(default=dict)),
                ('iterations', models.IntegerField(default=0)),
                ('final_psnr', models.FloatField(blank=True, null=True)),
                ('final_ssim', models.FloatField(blank=True, null=True)),
                ('gaussian_count', models.IntegerField(blank=True, null=True)),
                ('output_dir', models.CharField(max_length=500)),
                ('status', models.CharField(choices=[('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='running', max_length=10)),
                ('error_message', models.TextField(blank=True, null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='CompressedArtifact',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('level', models.CharField(choices=[('ours', 'Half precision'), ('ours_pp', 'Post-processed')], default='ours', max_length=10)),
                ('path', models.CharField(max_length=500)),
                ('size_bytes', models.BigIntegerField(default=0)),
                ('attribute_sizes', models.JSONField(default=dict)),
                ('gaussian_count', models.IntegerField(default=0)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(blank=True, null=True, on_delete=django.db.models.deletion.CASCADE, related_name='artifacts', to='CompactGaussianSplatting.trainingrun')),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]
