from django.core.management.base import BaseCommand, CommandError

from grasp_learning.exceptions import GraspLearningError
from grasp_learning.experiment import dump_qmaps
from grasp_learning.serializers import scene_from_yaml


class Command(BaseCommand):
    help = "Write the observation, action mask, Q-map and chosen-action overlay of a checkpoint on a scene."

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--scene', required=True, help="YAML scene document.")
        parser.add_argument('--output', help="Directory for the images (default: <run>/dumps/<checkpoint>).")

    def handle(self, *args, **options):
        try:
            scene = scene_from_yaml(options['scene'])
            paths = dump_qmaps(options['checkpoint'], scene, directory=options['output'])
        except GraspLearningError as exc:
            raise CommandError(str(exc))
        for name, path in paths.items():
            self.stdout.write(f"{name}: {path}")
