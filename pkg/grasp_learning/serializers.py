import math
from pathlib import Path

import yaml
from drf_spectacular.utils import extend_schema_field
from rest_framework import serializers

from .asr import MODALITIES, ModelConfig
from .bandit import TrainerConfig
from .conf import PRECISION_CHOICES, PRESETS
from .exceptions import ConfigurationError, GraspLearningError
from .experiment import RunConfig
from .groups import SymmetryGroup
from .models import EvaluationRecord, TrainingRun
from .simulator import DIMENSION_RANGES, SHAPES, TRAY_PRESETS, SimulatorConfig, scene_from_document
from .variants import variant_names


class StrictSerializer(serializers.Serializer):
    """Rejects keys it does not declare instead of silently dropping them."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ["Unknown setting."] for key in unknown})
        return super().to_internal_value(data)


class TrayColorField(serializers.Field):
    """A tray preset name or three channel values in [0, 1]."""

    def to_internal_value(self, data):
        if isinstance(data, str):
            if data not in TRAY_PRESETS:
                raise serializers.ValidationError(f"Invalid tray color. Choose from: {list(TRAY_PRESETS)}")
            return data
        if not isinstance(data, (list, tuple)) or len(data) != 3:
            raise serializers.ValidationError("Tray color must be a preset name or three values.")
        try:
            color = [float(v) for v in data]
        except (TypeError, ValueError):
            raise serializers.ValidationError("Tray color values must be numbers.")
        if not all(0.0 <= v <= 1.0 for v in color):
            raise serializers.ValidationError("Tray color values must lie in [0, 1].")
        return color

    def to_representation(self, value):
        return list(value) if not isinstance(value, str) else value


class GripperSerializer(StrictSerializer):
    aperture = serializers.FloatField(min_value=0.0, required=False)
    jaw_length = serializers.FloatField(min_value=0.0, required=False)
    jaw_width = serializers.FloatField(min_value=0.0, required=False)
    min_width = serializers.FloatField(min_value=0.0, required=False)


class SimulatorConfigSerializer(StrictSerializer):
    image_size = serializers.IntegerField(min_value=8, required=False)
    tray_size = serializers.FloatField(min_value=0.0, required=False)
    wall_margin = serializers.FloatField(min_value=0.0, required=False)
    n_objects = serializers.IntegerField(min_value=0, required=False)
    modality = serializers.ChoiceField(choices=MODALITIES, required=False)
    tray_color = TrayColorField(required=False)
    mask_threshold = serializers.FloatField(min_value=0.0, required=False)
    dilation_radius = serializers.IntegerField(min_value=0, required=False)
    descent_offset = serializers.FloatField(min_value=0.0, required=False)
    overlap_threshold = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    max_attempts = serializers.IntegerField(min_value=1, required=False)
    max_rejections = serializers.IntegerField(min_value=1, required=False)
    collision_penalty = serializers.BooleanField(required=False)
    collision_margin = serializers.FloatField(min_value=0.0, required=False)
    transparent_probability = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    success_degradation = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    gripper = GripperSerializer(required=False)

    def create(self, validated_data):
        preset = self.context.get('preset', 'default')
        try:
            return SimulatorConfig.from_settings(preset, **validated_data)
        except GraspLearningError as exc:
            raise serializers.ValidationError(str(exc))


class ModelConfigSerializer(StrictSerializer):
    q1_group = serializers.CharField(required=False)
    q1_widths = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=2, required=False)
    q2_group_depth = serializers.CharField(required=False)
    q2_group_color = serializers.CharField(required=False)
    q2_widths = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=1, required=False)
    crop_size = serializers.IntegerField(min_value=4, required=False)
    kernel_size = serializers.IntegerField(min_value=1, required=False)
    depth_scale = serializers.FloatField(min_value=0.0, required=False)
    color_mean = serializers.FloatField(required=False)
    color_std = serializers.FloatField(min_value=0.0, required=False)

    def _group(self, value, quotient):
        try:
            group = SymmetryGroup.parse(value)
        except GraspLearningError as exc:
            raise serializers.ValidationError(str(exc))
        if group.quotient != quotient:
            expected = "a mod-pi quotient such as C16/C2" if quotient else "a plain group such as D4"
            raise serializers.ValidationError(f"Expected {expected}, got {value!r}.")
        return value

    def validate_q1_group(self, value):
        return self._group(value, quotient=False)

    def validate_q2_group_depth(self, value):
        return self._group(value, quotient=True)

    def validate_q2_group_color(self, value):
        return self._group(value, quotient=True)

    def validate_kernel_size(self, value):
        if value % 2 == 0:
            raise serializers.ValidationError("Kernel size must be odd.")
        return value

    def create(self, validated_data):
        return ModelConfig.from_settings(self.context.get('preset', 'default'), **validated_data)


class TrainerConfigSerializer(StrictSerializer):
    tau_train = serializers.FloatField(min_value=0.0, required=False)
    tau_test = serializers.FloatField(min_value=0.0, required=False)
    augmentation_copies = serializers.IntegerField(min_value=0, required=False)
    off_policy_samples = serializers.IntegerField(min_value=1, required=False)
    batch_size = serializers.IntegerField(min_value=2, required=False)
    buffer_capacity = serializers.IntegerField(min_value=1, required=False)
    learning_rate = serializers.FloatField(min_value=0.0, required=False)
    steps_per_grasp = serializers.IntegerField(min_value=0, required=False)
    collision_penalty = serializers.BooleanField(required=False)
    running_window = serializers.IntegerField(min_value=1, required=False)
    brightness_augmentation = serializers.BooleanField(required=False)
    eval_failure_steps = serializers.IntegerField(min_value=0, required=False)
    augmentation_rotations = serializers.IntegerField(min_value=1, required=False)
    max_shift_fraction = serializers.FloatField(min_value=0.0, max_value=0.5, required=False)

    def validate(self, attrs):
        try:
            TrainerConfig.from_settings(self.context.get('preset', 'default'), **attrs)
        except ConfigurationError as exc:
            raise serializers.ValidationError(str(exc))
        return attrs

    def create(self, validated_data):
        return TrainerConfig.from_settings(self.context.get('preset', 'default'), **validated_data)


class RunConfigSerializer(StrictSerializer):
    """Validates a run configuration document and builds the frozen ``RunConfig``."""
    variant = serializers.ChoiceField(choices=variant_names(), required=False)
    seed = serializers.IntegerField(min_value=0, required=False)
    preset = serializers.ChoiceField(choices=PRESETS, required=False)
    grasp_budget = serializers.IntegerField(min_value=1, required=False)
    eval_period = serializers.IntegerField(min_value=1, required=False)
    eval_grasps = serializers.IntegerField(min_value=1, required=False)
    output_dir = serializers.CharField(required=False, allow_null=True)
    precision = serializers.ChoiceField(choices=PRECISION_CHOICES, required=False)
    record = serializers.BooleanField(required=False)
    simulator = SimulatorConfigSerializer(required=False)
    trainer = TrainerConfigSerializer(required=False)
    model = ModelConfigSerializer(required=False)

    def validate(self, attrs):
        budget, period = attrs.get('grasp_budget'), attrs.get('eval_period')
        if budget is not None and period is not None and budget < period:
            raise serializers.ValidationError({'grasp_budget': "Must be at least eval_period."})
        return attrs

    def create(self, validated_data):
        data = dict(validated_data)
        preset = data.pop('preset', self.context.get('preset', 'default'))
        context = {'preset': preset}
        simulator = SimulatorConfigSerializer(context=context).create(data.pop('simulator', {}))
        trainer = TrainerConfigSerializer(context=context).create(data.pop('trainer', {}))
        model = ModelConfigSerializer(context=context).create(data.pop('model', {}))
        try:
            return RunConfig.from_settings(preset=preset, simulator=simulator, trainer=trainer, model=model, **data)
        except ConfigurationError as exc:
            raise serializers.ValidationError(str(exc))


def format_errors(errors, prefix=''):
    """Flatten nested DRF errors into ``field: message`` lines."""
    lines = []
    if isinstance(errors, dict):
        for key, value in errors.items():
            lines.extend(format_errors(value, f"{prefix}{key}." if key != 'non_field_errors' else prefix))
    elif isinstance(errors, list):
        for value in errors:
            lines.extend(format_errors(value, prefix))
    else:
        lines.append(f"{prefix.rstrip('.') or 'config'}: {errors}")
    return lines


def run_config_from_document(document, **overrides):
    document = dict(document or {})
    document.update({key: value for key, value in overrides.items() if value is not None})
    serializer = RunConfigSerializer(data=document, context={'preset': document.get('preset', 'default')})
    if not serializer.is_valid():
        raise ConfigurationError("Invalid run configuration:\n" + '\n'.join(format_errors(serializer.errors)))
    try:
        return serializer.save()
    except serializers.ValidationError as exc:
        raise ConfigurationError("Invalid run configuration:\n" + '\n'.join(format_errors(exc.detail)))


def _read_yaml(path):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"File {path} does not exist")
    try:
        with path.open() as handle:
            return yaml.safe_load(handle) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path} is not valid YAML: {exc}")


def run_config_from_yaml(path, **overrides):
    return run_config_from_document(_read_yaml(path), **overrides)


class SceneObjectSerializer(StrictSerializer):
    shape = serializers.ChoiceField(choices=SHAPES)
    dims = serializers.ListField(child=serializers.FloatField(min_value=0.0), min_length=1, max_length=2)
    position = serializers.ListField(child=serializers.FloatField(), min_length=2, max_length=2)
    heading = serializers.ListField(child=serializers.FloatField(), min_length=2, max_length=2, required=False)
    height = serializers.FloatField(min_value=0.0)
    color = serializers.ListField(
        child=serializers.FloatField(min_value=0.0, max_value=1.0), min_length=3, max_length=3, required=False,
    )
    transparent = serializers.BooleanField(required=False, default=False)

    def validate(self, attrs):
        expected = len(DIMENSION_RANGES[attrs['shape']])
        if len(attrs['dims']) != expected:
            raise serializers.ValidationError({'dims': f"{attrs['shape']} needs {expected} dimensions."})
        if any(d <= 0 for d in attrs['dims']):
            raise serializers.ValidationError({'dims': "Dimensions must be positive."})
        if attrs['height'] <= 0:
            raise serializers.ValidationError({'height': "Height must be positive."})
        hx, hy = attrs.get('heading', (1.0, 0.0))
        norm = math.hypot(hx, hy)
        if norm == 0:
            raise serializers.ValidationError({'heading': "Heading must be a non-zero vector."})
        attrs['heading'] = [hx / norm, hy / norm]
        return attrs


class TraySerializer(StrictSerializer):
    size = serializers.FloatField(min_value=0.0, required=False)
    wall_margin = serializers.FloatField(min_value=0.0, required=False)
    color = TrayColorField(required=False)


class SceneSerializer(StrictSerializer):
    """Scene documents used by ``dump`` and stored in ``state.yaml``."""
    seed = serializers.IntegerField(min_value=0, required=False)
    attempts_made = serializers.IntegerField(min_value=0, required=False)
    tray = TraySerializer(required=False)
    objects = SceneObjectSerializer(many=True, required=False)

    def create(self, validated_data):
        return scene_from_document(validated_data)


def scene_from_yaml(path):
    serializer = SceneSerializer(data=_read_yaml(path))
    if not serializer.is_valid():
        raise ConfigurationError("Invalid scene document:\n" + '\n'.join(format_errors(serializer.errors)))
    return serializer.save()


class EvaluationRecordSerializer(serializers.ModelSerializer):
    class Meta:
        model = EvaluationRecord
        fields = ['id', 'run', 'grasp_index', 'success_rate', 'standard_error', 'n_grasps', 'created_at']
        read_only_fields = fields


class TrainingRunSerializer(serializers.ModelSerializer):
    """Serializer for TrainingRun model"""
    status_display = serializers.CharField(source='get_status_display', read_only=True)
    evaluation_count = serializers.SerializerMethodField()
    latest_evaluation = serializers.SerializerMethodField()

    class Meta:
        model = TrainingRun
        fields = [
            'id', 'variant', 'seed', 'status', 'status_display', 'output_dir', 'grasp_budget',
            'grasps_completed', 'final_success', 'evaluation_count', 'latest_evaluation',
            'created_at', 'updated_at',
        ]
        read_only_fields = fields

    @extend_schema_field(serializers.IntegerField)
    def get_evaluation_count(self, obj):
        return obj.evaluations.count()

    @extend_schema_field(EvaluationRecordSerializer(allow_null=True))
    def get_latest_evaluation(self, obj):
        latest = obj.latest_evaluation
        return EvaluationRecordSerializer(latest).data if latest else None


class VariantStatsSerializer(serializers.Serializer):
    variant = serializers.CharField()
    finished_runs = serializers.IntegerField()
    mean_final_success = serializers.FloatField(allow_null=True)
    standard_error = serializers.FloatField(allow_null=True)
    mean_last_evaluation = serializers.FloatField(allow_null=True)
