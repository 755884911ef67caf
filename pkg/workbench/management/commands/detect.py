import json

from django.core.management.base import BaseCommand, CommandError

from ...experiment_config import DETECTORS
from ...harness import jsonable
from ...lab.checkpoints import load_checkpoint
from ...lab.data import load_dataset
from ...lab.detection import DetectionConfig, cnc, nc_detect
from ...lab.exceptions import WorkbenchError
from ...rendering import plot_anomaly


class Command(BaseCommand):
    help = "Score a model for a backdoor with CNC or Neural Cleanse"

    def add_arguments(self, parser):
        parser.add_argument("--model", required=True, help="Checkpoint to inspect")
        parser.add_argument("--trust", required=True, help="Trusted dataset directory")
        parser.add_argument("--method", default="cnc", choices=DETECTORS)
        parser.add_argument("--steps", type=int, default=100, help="Optimisation steps per class")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--report", help="Write the anomaly report as JSON")
        parser.add_argument("--figure", help="Write the per-class score chart (PNG)")

    def handle(self, *args, **options):
        cfg = DetectionConfig(steps_per_class=options["steps"], seed=options["seed"])
        model = load_checkpoint(options["model"])
        trust, _ = load_dataset(options["trust"])
        try:
            if options["method"] == "cnc":
                headline, report = cnc(model, trust, cfg=cfg)
            else:
                headline, report = nc_detect(model, trust, cfg)
        except WorkbenchError as e:
            raise CommandError(str(e))

        payload = jsonable(report.as_dict())
        if options["report"]:
            with open(options["report"], "w", encoding="utf-8") as handle:
                json.dump(payload, handle, sort_keys=True, indent=2)
        if options["figure"]:
            plot_anomaly(payload, options["figure"])

        for label, score in enumerate(report.scores):
            marker = " <" if label == report.flagged_class else ""
            self.stdout.write(f"  class {label}: {score:.4f}{marker}")
        self.stdout.write(
            self.style.SUCCESS(
                f"{options['method']} score {headline:.4f}, flagged class {report.flagged_class}"
            )
        )
