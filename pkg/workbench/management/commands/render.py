from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from ...lab.checkpoints import load_checkpoint
from ...lab.data import load_dataset
from ...rendering import MissingRecordsError, latent_scatter, render


class Command(BaseCommand):
    help = "Render figures and tables from stored run records"

    def add_arguments(self, parser):
        parser.add_argument("runs", nargs="+", help="Run directories")
        parser.add_argument("--output", help="Figure directory (default: the first run's figures/)")
        parser.add_argument(
            "--latents",
            action="append",
            default=[],
            metavar="CHECKPOINT",
            help="Add a latent-space scatter panel for this checkpoint",
        )
        parser.add_argument("--data", help="Dataset whose latents are projected (with --latents)")

    def handle(self, *args, **options):
        written = []
        try:
            written.extend(render(options["runs"], options["output"]))
        except MissingRecordsError as e:
            if not options["latents"]:
                raise CommandError(f"Nothing to render: {e}")
            self.stdout.write(self.style.WARNING(f"Skipped record figures: {e}"))

        if options["latents"]:
            if not options["data"]:
                raise CommandError("--latents needs --data")
            data, _ = load_dataset(options["data"])
            models = {Path(path).stem: load_checkpoint(path) for path in options["latents"]}
            output = Path(options["output"] or Path(options["runs"][0]) / "figures")
            output.mkdir(parents=True, exist_ok=True)
            written.append(latent_scatter(models, data, output / "latents.png"))

        for path in written:
            self.stdout.write(f"  {path}")
        self.stdout.write(self.style.SUCCESS(f"Rendered {len(written)} file(s)"))
