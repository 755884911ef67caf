from django.http import HttpResponse, JsonResponse
from django.shortcuts import get_object_or_404

from .models import ExperimentRun
from .statistics import RunSummaryCalculator, summary_csv


def run_data_api(_request, pk):
    """API endpoint to get a run and its ordered stage records as JSON"""
    run = get_object_or_404(ExperimentRun, pk=pk)

    data = {
        "run": {
            "id": run.id,
            "name": run.name,
            "game": run.game,
            "status": run.status,
            "config_hash": run.config_hash,
            "code_hash": run.code_hash,
            "config": run.config,
            "output_dir": run.output_dir,
            "started_at": run.started_at.isoformat() if run.started_at else None,
            "finished_at": run.finished_at.isoformat() if run.finished_at else None,
            "wall_clock_seconds": run.wall_clock_seconds,
            "summary": run.summary,
        },
        "stages": [stage.as_record() for stage in run.stages.order_by("sequence")],
    }

    return JsonResponse(data)


def run_summary_csv(_request, pk):
    """The run's summary table, recomputed from its stage records"""
    run = get_object_or_404(ExperimentRun, pk=pk)
    rows = RunSummaryCalculator(run).calculate_rows()
    response = HttpResponse(summary_csv(rows), content_type="text/csv")
    response["Content-Disposition"] = f'attachment; filename="{run.config_hash[:12]}-summary.csv"'
    return response
