from django.core.exceptions import ValidationError
from django.db import models
from django.db.models.signals import post_save
from django.dispatch import receiver
from django.utils import timezone


class ExperimentRun(models.Model):
    """One experiment: a validated config, its hashes and its outcome"""

    STATUS_PENDING = "pending"
    STATUS_RUNNING = "running"
    STATUS_COMPLETE = "complete"
    STATUS_INCOMPLETE = "incomplete"
    STATUS_CHOICES = [
        (STATUS_PENDING, "Pending"),
        (STATUS_RUNNING, "Running"),
        (STATUS_COMPLETE, "Complete"),
        (STATUS_INCOMPLETE, "Incomplete"),
    ]

    config_hash = models.CharField(
        max_length=64, unique=True, help_text="sha256 of the canonical config bytes"
    )
    code_hash = models.CharField(max_length=40, blank=True)
    name = models.CharField(max_length=200, blank=True)
    game = models.CharField(max_length=50)
    config = models.JSONField(default=dict)
    status = models.CharField(
        max_length=20, choices=STATUS_CHOICES, default=STATUS_PENDING
    )
    output_dir = models.CharField(max_length=500, blank=True)
    created_at = models.DateTimeField(default=timezone.now)
    started_at = models.DateTimeField(null=True, blank=True)
    finished_at = models.DateTimeField(null=True, blank=True)
    wall_clock_seconds = models.FloatField(null=True, blank=True)

    # Pre-computed summary, cleared whenever a stage record is appended
    summary = models.JSONField(default=dict)
    last_calculated = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ["-created_at"]
        indexes = [
            models.Index(fields=["config_hash"], name="workbench_run_hash_idx"),
            models.Index(fields=["status"], name="workbench_run_status_idx"),
            models.Index(fields=["game", "-created_at"], name="workbench_run_game_idx"),
        ]

    def __str__(self):
        label = self.name or self.game
        return f"{label} ({self.config_hash[:8]}, {self.status})"

    @property
    def is_complete(self):
        return self.status == self.STATUS_COMPLETE

    def next_sequence(self):
        latest = self.stages.aggregate(latest=models.Max("sequence"))["latest"]
        return 0 if latest is None else latest + 1

    def invalidate_summary(self):
        """Mark the summary as needing recalculation"""
        self.summary = {}
        self.save(update_fields=["summary", "last_calculated"])

    def clean(self):
        super().clean()

        if self.wall_clock_seconds is not None and self.wall_clock_seconds < 0:
            raise ValidationError("Wall clock time cannot be negative")
        if self.config and not isinstance(self.config, dict):
            raise ValidationError("Config must be a dictionary")
        if self.summary and not isinstance(self.summary, dict):
            raise ValidationError("Summary must be a dictionary")
        if self.status not in dict(self.STATUS_CHOICES):
            raise ValidationError(f"Unknown status {self.status!r}")

    def save(self, *args, **kwargs):
        """Override save to run validation"""
        self.clean()
        super().save(*args, **kwargs)


class StageRecord(models.Model):
    """One append-only transcript row: a training, a game, a trace or a report"""

    KIND_TRAIN = "train"
    KIND_POISON = "poison"
    KIND_GAME = "game"
    KIND_DETECTABILITY = "detectability"
    KIND_REPAIR = "repair"
    KIND_ANOMALY = "anomaly"
    KIND_METRIC = "metric"
    KIND_GRID = "grid"
    KIND_CHOICES = [
        (KIND_TRAIN, "Training"),
        (KIND_POISON, "Poisoning"),
        (KIND_GAME, "Robustness game"),
        (KIND_DETECTABILITY, "Detectability population"),
        (KIND_REPAIR, "Repair trace"),
        (KIND_ANOMALY, "Anomaly report"),
        (KIND_METRIC, "Metric report"),
        (KIND_GRID, "Grid-search cell"),
    ]

    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name="stages")
    sequence = models.IntegerField()
    kind = models.CharField(max_length=20, choices=KIND_CHOICES)
    attack = models.CharField(max_length=50, blank=True)
    defense = models.CharField(max_length=50, blank=True)
    m = models.IntegerField(null=True, blank=True)
    b = models.IntegerField(null=True, blank=True)
    r = models.IntegerField(null=True, blank=True)
    delta = models.FloatField(null=True, blank=True)
    repeat = models.IntegerField(null=True, blank=True)
    seed = models.BigIntegerField(null=True, blank=True)
    payload = models.JSONField(default=dict)
    created_at = models.DateTimeField(default=timezone.now)

    class Meta:
        ordering = ["run", "sequence"]
        unique_together = ["run", "sequence"]
        indexes = [
            models.Index(fields=["run", "kind"], name="workbench_stage_kind_idx"),
        ]

    def __str__(self):
        return f"#{self.sequence} {self.kind} {self.attack}/{self.defense or 'none'}"

    def as_record(self):
        return {
            "sequence": self.sequence,
            "kind": self.kind,
            "attack": self.attack,
            "defense": self.defense,
            "m": self.m,
            "b": self.b,
            "r": self.r,
            "delta": self.delta,
            "repeat": self.repeat,
            "seed": self.seed,
            "payload": self.payload,
        }

    def save(self, *args, **kwargs):
        """Stage records are append-only"""
        if self.pk is not None and StageRecord.objects.filter(pk=self.pk).exists():
            raise ValidationError("Stage records are append-only")
        if not isinstance(self.payload, dict):
            raise ValidationError("Payload must be a dictionary")
        super().save(*args, **kwargs)


@receiver(post_save, sender=StageRecord)
def invalidate_run_summary_on_stage_append(sender, instance, created, **kwargs):
    """Invalidate the pre-computed summary when a stage record is appended"""
    if created and instance.run_id:
        try:
            run = ExperimentRun.objects.get(pk=instance.run_id)
        except ExperimentRun.DoesNotExist:
            return
        if run.summary:
            run.invalidate_summary()
