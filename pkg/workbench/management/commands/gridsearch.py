import json
from pathlib import Path

from ..base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Tune a defense's hyper-parameters on a self-poisoned suspect model"

    def handle(self, *args, **options):
        result = self.execute_config(self.read_config(options, game="gridsearch"), options)
        best_path = Path(result.run.output_dir) / "best_config.json"
        if not best_path.exists():
            return
        best = json.loads(best_path.read_text(encoding="utf-8"))
        metrics = [
            stage.payload
            for stage in result.run.stages.filter(kind="metric").order_by("sequence")
        ]
        if metrics and metrics[-1].get("infeasible"):
            self.stdout.write(
                self.style.WARNING("No config stayed within the CDA budget; reporting the smallest loss")
            )
        self.stdout.write(json.dumps(best, sort_keys=True, indent=2))
