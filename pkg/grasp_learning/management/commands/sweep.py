from django.core.management.base import BaseCommand, CommandError

from grasp_learning.conf import PRESETS
from grasp_learning.exceptions import GraspLearningError
from grasp_learning.experiment import plan_sweep, run_sweep
from grasp_learning.variants import variant_names


class Command(BaseCommand):
    help = "Train several variants over several seeds as parallel subprocesses."

    def add_arguments(self, parser):
        parser.add_argument('--variants', nargs='+', default=['ours'], choices=variant_names())
        parser.add_argument('--seeds', nargs='+', type=int, default=[0, 1, 2, 3])
        parser.add_argument('--workers', type=int)
        parser.add_argument('--preset', choices=PRESETS, default='default')
        parser.add_argument('--config', help="YAML run configuration passed to every job.")
        parser.add_argument('--output', help="Root directory for the run directories.")
        parser.add_argument('--dry-run', action='store_true', help="Print the planned commands without running them.")

    def handle(self, *args, **options):
        if options['workers'] is not None and options['workers'] < 1:
            raise CommandError("--workers must be at least 1")
        try:
            jobs = plan_sweep(options['variants'], options['seeds'], output_root=options['output'],
                              preset=options['preset'], config_path=options['config'])
        except GraspLearningError as exc:
            raise CommandError(str(exc))
        if options['dry_run']:
            for job in jobs:
                self.stdout.write(' '.join(job.command))
            return
        failed = [(job, code) for job, code in run_sweep(jobs, options['workers']) if code != 0]
        for job, code in failed:
            self.stderr.write(f"{job.variant} seed {job.seed} failed with exit code {code}")
        if failed:
            raise CommandError(f"{len(failed)} of {len(jobs)} runs failed")
        self.stdout.write(self.style.SUCCESS(f"Completed {len(jobs)} runs"))
