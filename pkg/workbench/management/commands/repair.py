import json
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from ...experiment_config import repair_config
from ...harness import jsonable
from ...lab.checkpoints import load_checkpoint, save_checkpoint
from ...lab.data import LabeledSet, holdout_split, load_dataset
from ...lab.defenses import DEFENSES, run_defense
from ...lab.exceptions import WorkbenchError
from ...lab.repair import RepairEvaluation
from ...lab.triggers import apply_trigger, load_trigger
from ..base import INVALID_CONFIG, parse_field_overrides


def triggered_report_set(data, trigger, target):
    """Non-target samples of ``data`` carrying ``trigger``, labelled with ``target``."""
    keep = data.labels != target
    return LabeledSet(
        images=apply_trigger(data.images[keep], trigger),
        labels=np.full(int(keep.sum()), target, np.int64),
        class_count=data.class_count,
    )


class Command(BaseCommand):
    help = "Repair a suspect model with a post-training defense under a CDA budget"

    def add_arguments(self, parser):
        parser.add_argument("--model", required=True, help="Suspect checkpoint")
        parser.add_argument("--trust", required=True, help="Trusted dataset directory")
        parser.add_argument("--output", required=True, help="Repaired checkpoint path")
        parser.add_argument("--method", default="pivotal-tuning", choices=sorted(DEFENSES))
        parser.add_argument("--delta", type=float, default=settings.WORKBENCH["DEFAULT_DELTA"])
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--eval", help="Dataset measuring CDA (default: held out of --trust)")
        parser.add_argument(
            "--holdout",
            type=float,
            default=0.4,
            help="Share of each trusted class held out for CDA when --eval is not given",
        )
        parser.add_argument("--trigger", help="Attacker trigger (.npz) to report ASR along the trace")
        parser.add_argument("--target", type=int, default=0, help="Target class of --trigger")
        parser.add_argument(
            "--reference",
            action="store_true",
            help="Start from the full-scale operating point of --method",
        )
        parser.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="FIELD=VALUE",
            help="Repair field override, e.g. steps=500",
        )

    def handle(self, *args, **options):
        values = {
            "method": options["method"],
            "delta": options["delta"],
            "seed": options["seed"],
            **parse_field_overrides(options["overrides"]),
        }
        try:
            cfg = repair_config({"defense": {**values, "reference": options["reference"]}})
        except (TypeError, ValueError) as e:
            raise CommandError(f"Invalid repair config: {e}", returncode=INVALID_CONFIG)

        suspect = load_checkpoint(options["model"])
        trust, _ = load_dataset(options["trust"])
        if options["eval"]:
            clean = load_dataset(options["eval"])[0]
        else:
            try:
                trust, clean = holdout_split(trust, options["holdout"], options["seed"])
            except ValueError as e:
                raise CommandError(f"Invalid --holdout: {e}", returncode=INVALID_CONFIG)
            if len(clean) == 0:
                raise CommandError(
                    "The trusted set is too small to hold out an evaluation split; pass --eval",
                    returncode=INVALID_CONFIG,
                )
        report = None
        if options["trigger"]:
            report = triggered_report_set(clean, load_trigger(options["trigger"]), options["target"])

        try:
            model, trace = run_defense(
                cfg.method, suspect, trust, cfg, RepairEvaluation(clean=clean, report=report)
            )
        except WorkbenchError as e:
            raise CommandError(str(e))

        output = save_checkpoint(model, options["output"])
        trace_path = Path(output).with_suffix(".trace.json")
        trace_path.write_text(json.dumps(jsonable(trace.as_dict()), sort_keys=True, indent=2))

        selected = trace.selected
        canary = trace.meta.get("canary")
        if canary:
            self.stdout.write(
                f"Canary on class {canary['target_class']}: probe ASR {canary['asr']:.3f}"
            )
        if trace.fallback:
            self.stdout.write(
                self.style.WARNING("No checkpoint stayed within the CDA budget; kept the suspect")
            )
        self.stdout.write(
            self.style.SUCCESS(
                f"{cfg.method}: step {trace.selected_step} ({trace.halting_reason}), "
                f"CDA {trace.pre_cda:.3f} -> {selected['cda']:.3f} -> {output}"
            )
        )
