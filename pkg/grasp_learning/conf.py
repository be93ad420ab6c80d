"""Typed access to the ``GRASP_LEARNING`` settings block."""
import copy

from django.conf import settings

from .exceptions import ConfigurationError

PRECISION_CHOICES = ('float32', 'float64')
SECTIONS = ('SIMULATOR', 'MODEL', 'TRAINER', 'EXPERIMENT')
PRESETS = ('default', 'desk')


def grasp_settings():
    block = getattr(settings, 'GRASP_LEARNING', None)
    if block is None:
        raise ConfigurationError("GRASP_LEARNING settings block is missing")
    if block.get('PRECISION') not in PRECISION_CHOICES:
        raise ConfigurationError(
            f"Invalid GRASP_PRECISION {block.get('PRECISION')!r}. Choose from: {', '.join(PRECISION_CHOICES)}"
        )
    return block


def section(name, preset='default'):
    """A private copy of one sub-block, with the desk-scale overrides merged in when asked."""
    if name not in SECTIONS:
        raise ConfigurationError(f"Unknown settings section {name!r}. Choose from: {', '.join(SECTIONS)}")
    if preset not in PRESETS:
        raise ConfigurationError(f"Unknown preset {preset!r}. Choose from: {', '.join(PRESETS)}")
    block = grasp_settings()
    values = copy.deepcopy(block[name])
    if preset == 'desk':
        merge(values, block.get('DESK_SCALE', {}).get(name, {}))
    return values


def merge(base, overrides):
    """Recursive in-place dictionary update."""
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


def output_dir():
    return grasp_settings()['OUTPUT_DIR']
