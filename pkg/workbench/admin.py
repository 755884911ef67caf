from django.contrib import admin

from .models import ExperimentRun, StageRecord


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = [
        "name",
        "game",
        "status",
        "created_at",
        "stage_count",
        "config_hash_short",
    ]
    list_filter = ["status", "game", "created_at"]
    search_fields = ["name", "config_hash", "code_hash"]
    readonly_fields = ["created_at", "config_hash", "code_hash", "summary"]
    fieldsets = [
        ("Run Information", {"fields": ["name", "game", "status", "output_dir"]}),
        (
            "Reproducibility",
            {"fields": ["config_hash", "code_hash", "created_at"]},
        ),
        (
            "Timing",
            {"fields": ["started_at", "finished_at", "wall_clock_seconds"]},
        ),
        ("Config", {"fields": ["config"], "classes": ["collapse"]}),
        ("Summary", {"fields": ["summary"], "classes": ["collapse"]}),
    ]

    def stage_count(self, obj):
        return obj.stages.count()

    stage_count.short_description = "Stages"

    def config_hash_short(self, obj):
        """Display shortened config hash for list view"""
        return f"{obj.config_hash[:8]}..."

    config_hash_short.short_description = "Config Hash"


@admin.register(StageRecord)
class StageRecordAdmin(admin.ModelAdmin):
    list_display = ["run", "sequence", "kind", "attack", "defense", "m", "r", "repeat"]
    list_filter = ["kind", "attack", "defense"]
    search_fields = ["run__name", "run__config_hash", "attack", "defense"]
    list_select_related = ["run"]

    def has_change_permission(self, request, obj=None):
        return False
