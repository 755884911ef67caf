import shutil
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from ...models import ExperimentRun


def directory_size(path):
    return sum(f.stat().st_size for f in path.rglob("*") if f.is_file())


class Command(BaseCommand):
    help = "List or remove cached runs"

    def add_arguments(self, parser):
        parser.add_argument("action", choices=["ls", "rm"])
        parser.add_argument("hashes", nargs="*", help="Config hashes or unique prefixes (rm)")
        parser.add_argument("--all", action="store_true", help="Remove every cached run (rm)")
        parser.add_argument(
            "--dry-run",
            action="store_true",
            help="Show what would be removed without removing it",
        )

    def handle(self, *args, **options):
        root = Path(settings.WORKBENCH["CACHE_ROOT"])
        if options["action"] == "ls":
            self._list(root)
        else:
            self._remove(root, options)

    def _run_directories(self, root):
        if not root.is_dir():
            return []
        return sorted(p for p in root.iterdir() if p.is_dir() and p.name != "datasets")

    def _list(self, root):
        runs = {run.config_hash: run for run in ExperimentRun.objects.all()}
        directories = self._run_directories(root)
        if not directories and not runs:
            self.stdout.write(self.style.WARNING("No cached runs."))
            return
        for digest in sorted(set(runs) | {d.name for d in directories}):
            run = runs.get(digest)
            path = root / digest
            size = directory_size(path) if path.is_dir() else 0
            if run is None:
                self.stdout.write(f"{digest[:12]}  {'?':<18} {'untracked':<10} {size:>10}  {path}")
            else:
                self.stdout.write(
                    f"{digest[:12]}  {run.game:<18} {run.status:<10} {size:>10}  {run.name}"
                )

    def _remove(self, root, options):
        runs = ExperimentRun.objects.all()
        known = sorted({run.config_hash for run in runs} | {d.name for d in self._run_directories(root)})
        if options["all"]:
            targets = known
        elif options["hashes"]:
            targets = []
            for prefix in options["hashes"]:
                matches = [digest for digest in known if digest.startswith(prefix)]
                if len(matches) != 1:
                    raise CommandError(
                        f"{prefix!r} matches {len(matches)} cached runs; give a longer prefix"
                    )
                targets.append(matches[0])
        else:
            raise CommandError("Must give config hashes or --all")

        if not targets:
            self.stdout.write(self.style.WARNING("No cached runs found matching criteria."))
            return
        if options["dry_run"]:
            self.stdout.write(self.style.WARNING("DRY RUN - No changes will be made"))
            for digest in targets:
                self.stdout.write(f"Would remove: {digest}")
            return

        for digest in targets:
            ExperimentRun.objects.filter(config_hash=digest).delete()
            shutil.rmtree(root / digest, ignore_errors=True)
            self.stdout.write(f"✓ Removed {digest[:12]}")
        self.stdout.write(self.style.SUCCESS(f"Complete: {len(targets)} run(s) removed"))
