# Generated by Django 5.2.4 on 2026-10-12 09:41

import django.db.models.deletion
import django.utils.timezone
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="ExperimentRun",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                (
                    "config_hash",
                    models.CharField(
                        help_text="sha256 of the canonical config bytes",
                        max_length=64,
                        unique=True,
                    ),
                ),
                ("code_hash", models.CharField(blank=True, max_length=40)),
                ("name", models.CharField(blank=True, max_length=200)),
                ("game", models.CharField(max_length=50)),
                ("config", models.JSONField(default=dict)),
                (
                    "status",
                    models.CharField(
                        choices=[
                            ("pending", "Pending"),
                            ("running", "Running"),
                            ("complete", "Complete"),
                            ("incomplete", "Incomplete"),
                        ],
                        default="pending",
                        max_length=20,
                    ),
                ),
                ("output_dir", models.CharField(blank=True, max_length=500)),
                (
                    "created_at",
                    models.DateTimeField(default=django.utils.timezone.now),
                ),
                ("started_at", models.DateTimeField(blank=True, null=True)),
                ("finished_at", models.DateTimeField(blank=True, null=True)),
                ("wall_clock_seconds", models.FloatField(blank=True, null=True)),
                ("summary", models.JSONField(default=dict)),
                ("last_calculated", models.DateTimeField(auto_now=True)),
            ],
            options={
                "ordering": ["-created_at"],
                "indexes": [
                    models.Index(fields=["config_hash"], name="workbench_run_hash_idx"),
                    models.Index(fields=["status"], name="workbench_run_status_idx"),
                    models.Index(
                        fields=["game", "-created_at"], name="workbench_run_game_idx"
                    ),
                ],
            },
        ),
        migrations.CreateModel(
            name="StageRecord",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                ("sequence", models.IntegerField()),
                (
                    "kind",
                    models.CharField(
                        choices=[
                            ("train", "Training"),
                            ("poison", "Poisoning"),
                            ("game", "Robustness game"),
                            ("detectability", "Detectability population"),
                            ("repair", "Repair trace"),
                            ("anomaly", "Anomaly report"),
                            ("metric", "Metric report"),
                            ("grid", "Grid-search cell"),
                        ],
                        max_length=20,
                    ),
                ),
                ("attack", models.CharField(blank=True, max_length=50)),
                ("defense", models.CharField(blank=True, max_length=50)),
                ("m", models.IntegerField(blank=True, null=True)),
                ("b", models.IntegerField(blank=True, null=True)),
                ("r", models.IntegerField(blank=True, null=True)),
                ("delta", models.FloatField(blank=True, null=True)),
                ("repeat", models.IntegerField(blank=True, null=True)),
                ("seed", models.BigIntegerField(blank=True, null=True)),
                ("payload", models.JSONField(default=dict)),
                (
                    "created_at",
                    models.DateTimeField(default=django.utils.timezone.now),
                ),
                (
                    "run",
                    models.ForeignKey(
                        on_delete=django.db.models.deletion.CASCADE,
                        related_name="stages",
                        to="workbench.experimentrun",
                    ),
                ),
            ],
            options={
                "ordering": ["run", "sequence"],
                "indexes": [
                    models.Index(fields=["run", "kind"], name="workbench_stage_kind_idx"),
                ],
                "unique_together": {("run", "sequence")},
            },
        ),
    ]
