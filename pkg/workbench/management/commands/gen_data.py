from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from ...harness import dataset_path
from ...lab.data import generate_synthetic_dataset, save_dataset
from ...lab.exceptions import InvalidDatasetError
from ..base import INVALID_CONFIG


class Command(BaseCommand):
    help = "Generate a synthetic classification dataset and store it on disk"

    def add_arguments(self, parser):
        parser.add_argument("--classes", type=int, default=settings.WORKBENCH["CLASS_COUNT"])
        parser.add_argument("--per-class", type=int, default=300)
        parser.add_argument("--image-size", type=int, default=settings.WORKBENCH["IMAGE_SIZE"])
        parser.add_argument("--channels", type=int, default=3)
        parser.add_argument("--noise", type=float, default=0.08)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument(
            "--output",
            help="Target directory (default: the dataset cache entry experiments reuse)",
        )

    def handle(self, *args, **options):
        dataset = {
            "classes": options["classes"],
            "per_class": options["per_class"],
            "image_size": options["image_size"],
            "channels": options["channels"],
            "noise": options["noise"],
            "seed": options["seed"],
        }
        try:
            data, _ = generate_synthetic_dataset(
                dataset["classes"],
                dataset["per_class"],
                dataset["image_size"],
                dataset["seed"],
                channels=dataset["channels"],
                noise=dataset["noise"],
            )
        except InvalidDatasetError as e:
            raise CommandError(str(e), returncode=INVALID_CONFIG)

        path = save_dataset(data, options["output"] or dataset_path(dataset), meta={"dataset": dataset})
        self.stdout.write(
            self.style.SUCCESS(
                f"Generated {len(data)} samples ({dataset['classes']} classes, "
                f"{dataset['image_size']}px) in {path}"
            )
        )
