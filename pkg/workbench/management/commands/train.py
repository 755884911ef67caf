from django.core.management.base import BaseCommand, CommandError

from ...lab.checkpoints import load_checkpoint, save_checkpoint
from ...lab.data import load_dataset
from ...lab.exceptions import WorkbenchError
from ...lab.network import accuracy
from ...lab.training import PRESETS, preset, train
from ..base import INVALID_CONFIG, parse_field_overrides


class Command(BaseCommand):
    help = "Train a classifier on a stored dataset and write a checkpoint"

    def add_arguments(self, parser):
        parser.add_argument("--data", required=True, help="Dataset directory")
        parser.add_argument("--output", required=True, help="Checkpoint path")
        parser.add_argument("--preset", default="desk", choices=sorted(PRESETS))
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--init", help="Fine-tune from this checkpoint instead of a fresh model")
        parser.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="FIELD=VALUE",
            help="Trainer field override, e.g. steps=300",
        )

    def handle(self, *args, **options):
        overrides = parse_field_overrides(options["overrides"])
        try:
            cfg = preset(options["preset"], **overrides).with_seed(options["seed"])
        except (TypeError, ValueError) as e:
            raise CommandError(f"Invalid trainer config: {e}", returncode=INVALID_CONFIG)

        data, meta = load_dataset(options["data"])
        try:
            init = load_checkpoint(options["init"]) if options["init"] else None
            model = train(data, cfg, init=init)
        except WorkbenchError as e:
            raise CommandError(str(e))
        if meta.get("attack"):
            model.attack = meta["attack"]

        path = save_checkpoint(model, options["output"])
        fit = accuracy(data, data.labels, model)
        self.stdout.write(
            self.style.SUCCESS(f"Trained on {len(data)} samples (train accuracy {fit:.3f}) -> {path}")
        )
