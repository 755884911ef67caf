from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from ...harness import oracle_for
from ...lab.attacks import ATTACKS, CODE_POISONING, AttackSpec, poison
from ...lab.checkpoints import load_checkpoint
from ...lab.data import load_dataset, save_dataset
from ...lab.exceptions import WorkbenchError
from ...lab.triggers import save_trigger
from ..base import INVALID_CONFIG, parse_field_overrides


class Command(BaseCommand):
    help = "Inject poisoned samples into a stored dataset"

    def add_arguments(self, parser):
        parser.add_argument("--data", required=True, help="Clean dataset directory")
        parser.add_argument("--output", required=True, help="Directory for the poisoned dataset")
        parser.add_argument("--attack", default="badnets", choices=sorted(ATTACKS))
        parser.add_argument("--m", type=int, required=True, help="Number of poisoned samples")
        parser.add_argument("--target", type=int, default=0, help="Target class")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--surrogate", help="Surrogate checkpoint for adversarial triggers")
        parser.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="FIELD=VALUE",
            help="Attack field override, e.g. boost=4",
        )

    def handle(self, *args, **options):
        values = {
            "attack": options["attack"],
            "target_class": options["target"],
            "poison_count": options["m"],
            "seed": options["seed"],
            **parse_field_overrides(options["overrides"]),
        }
        try:
            spec = AttackSpec(**values)
        except (TypeError, ValueError) as e:
            raise CommandError(f"Invalid attack: {e}", returncode=INVALID_CONFIG)

        data, _ = load_dataset(options["data"])
        surrogate = load_checkpoint(options["surrogate"]) if options["surrogate"] else None
        try:
            result = poison(data, oracle_for(data), spec, surrogate=surrogate)
        except WorkbenchError as e:
            raise CommandError(str(e))

        output = Path(options["output"])
        save_dataset(result.data, output, meta={"attack": spec.as_dict()})
        for index, trigger in enumerate(result.triggers):
            save_trigger(trigger, output / "triggers" / f"trigger_{index}.npz")

        if spec.label_rule == CODE_POISONING:
            self.stdout.write(
                self.style.WARNING(
                    f"{spec.attack} poisons the training code, not the data; the dataset is unchanged"
                )
            )
        self.stdout.write(
            self.style.SUCCESS(
                f"Injected {len(result.injected_indices)} samples ({spec.label_rule}) -> {output}"
            )
        )
