from dataclasses import asdict

from django.conf import settings
from rest_framework import serializers

from .scene_model import Camera
from .trainer import TrainConfig


class CameraSerializer(serializers.Serializer):
    """
    Serializer for one camera record of a camera JSON document
    """
    width = serializers.IntegerField(min_value=1)
    height = serializers.IntegerField(min_value=1)
    fx = serializers.FloatField()
    fy = serializers.FloatField()
    cx = serializers.FloatField()
    cy = serializers.FloatField()
    world_to_camera = serializers.ListField(
        child=serializers.ListField(child=serializers.FloatField(), min_length=4, max_length=4),
        min_length=4, max_length=4,
        help_text="4x4 world-to-camera matrix, OpenCV axes"
    )
    near = serializers.FloatField(default=0.01, min_value=0.0)
    far = serializers.FloatField(default=100.0)
    t = serializers.FloatField(default=0.0, min_value=0.0, max_value=1.0)
    image = serializers.CharField(required=False, allow_blank=False,
                                  help_text="Target image path, relative to the camera file")

    def validate(self, attrs):
        if attrs['fx'] <= 0 or attrs['fy'] <= 0:
            raise serializers.ValidationError("Focal lengths must be positive.")
        if attrs['far'] <= attrs['near']:
            raise serializers.ValidationError("far must be greater than near.")
        return attrs

    @staticmethod
    def to_camera(record) -> Camera:
        return Camera(
            width=record['width'], height=record['height'],
            fx=record['fx'], fy=record['fy'], cx=record['cx'], cy=record['cy'],
            world_to_camera=record['world_to_camera'],
            near=record['near'], far=record['far'],
        )


class PointCloudSerializer(serializers.Serializer):
    """
    Serializer for the initial point cloud handed to training
    """
    points = serializers.ListField(
        child=serializers.ListField(child=serializers.FloatField(), min_length=3, max_length=3))
    colors = serializers.ListField(
        child=serializers.ListField(child=serializers.FloatField(min_value=0.0, max_value=1.0),
                                    min_length=3, max_length=3),
        required=False, allow_null=True)
    timestamps = serializers.ListField(child=serializers.FloatField(min_value=0.0, max_value=1.0),
                                       required=False, allow_null=True)

    def validate(self, attrs):
        n = len(attrs['points'])
        for name in ('colors', 'timestamps'):
            if attrs.get(name) is not None and len(attrs[name]) != n:
                raise serializers.ValidationError({name: [f"Expected {n} entries, one per point."]})
        return attrs


class TrainConfigSerializer(serializers.Serializer):
    """
    Serializer for training configuration documents. Values are merged over
    the named preset; keys left out fall back to the TrainConfig defaults.
    """
    preset = serializers.CharField(required=False, allow_null=True)
    mode = serializers.ChoiceField(choices=[('static', 'Static'), ('dynamic', 'Dynamic')], required=False)
    iterations = serializers.IntegerField(min_value=1, required=False)
    seed = serializers.IntegerField(min_value=0, required=False)

    use_mask = serializers.BooleanField(required=False)
    color_mode = serializers.ChoiceField(choices=[('field', 'Colour field'), ('sh', 'Spherical harmonics')],
                                         required=False)
    use_rvq = serializers.BooleanField(required=False)
    use_temporal_rvq = serializers.BooleanField(required=False)
    half_precision = serializers.BooleanField(required=False)

    lambda_mask = serializers.FloatField(min_value=0.0, required=False)
    mask_threshold = serializers.FloatField(required=False)
    lambda_ssim = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)

    position_lr_init = serializers.FloatField(required=False)
    position_lr_final = serializers.FloatField(required=False)
    feature_lr = serializers.FloatField(required=False)
    opacity_lr = serializers.FloatField(required=False)
    scaling_lr = serializers.FloatField(required=False)
    rotation_lr = serializers.FloatField(required=False)
    mask_lr = serializers.FloatField(required=False)
    field_lr = serializers.FloatField(required=False)
    field_lr_milestones = serializers.ListField(child=serializers.IntegerField(min_value=0), required=False)
    field_lr_gamma = serializers.FloatField(min_value=0.0, required=False)
    codebook_lr = serializers.FloatField(required=False)
    phi_lr = serializers.FloatField(required=False)
    motion_lr = serializers.FloatField(required=False)
    t_center_lr = serializers.FloatField(required=False)
    t_scale_lr = serializers.FloatField(required=False)

    densify_from_iter = serializers.IntegerField(min_value=0, required=False)
    densify_until_iter = serializers.IntegerField(min_value=0, required=False)
    densify_interval = serializers.IntegerField(min_value=1, required=False)
    densify_grad_threshold = serializers.FloatField(min_value=0.0, required=False)
    percent_dense = serializers.FloatField(min_value=0.0, required=False)
    opacity_reset_interval = serializers.IntegerField(min_value=0, required=False)
    min_opacity = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)

    rvq_window = serializers.IntegerField(min_value=0, required=False)
    rvq_size = serializers.IntegerField(min_value=1, max_value=65536, required=False)
    rvq_stages = serializers.IntegerField(min_value=1, required=False)
    temporal_rvq_size = serializers.IntegerField(min_value=1, max_value=65536, required=False)
    temporal_rvq_stages = serializers.IntegerField(min_value=1, required=False)
    kmeans_iters = serializers.IntegerField(min_value=0, required=False)

    hash_levels = serializers.IntegerField(min_value=1, required=False)
    hash_features = serializers.IntegerField(min_value=1, required=False)
    hash_min_resolution = serializers.IntegerField(min_value=1, required=False)
    hash_max_resolution = serializers.IntegerField(min_value=1, required=False)
    hash_log2_size = serializers.IntegerField(min_value=1, max_value=24, required=False)
    field_hidden = serializers.IntegerField(min_value=1, required=False)
    field_layers = serializers.IntegerField(min_value=0, required=False)
    phi_hidden = serializers.IntegerField(min_value=1, required=False)
    phi_layers = serializers.IntegerField(min_value=0, required=False)

    LEARNING_RATES = (
        'position_lr_init', 'position_lr_final', 'feature_lr', 'opacity_lr', 'scaling_lr',
        'rotation_lr', 'mask_lr', 'field_lr', 'codebook_lr', 'phi_lr', 'motion_lr',
        't_center_lr', 't_scale_lr',
    )

    def to_internal_value(self, data):
        if not isinstance(data, dict):
            raise serializers.ValidationError({'non_field_errors': ["Expected a JSON object."]})
        unknown = sorted(set(data) - set(self.fields))
        if unknown:
            raise serializers.ValidationError({name: ["Unknown configuration key."] for name in unknown})
        preset = data.get('preset')
        if preset:
            presets = settings.COMPACT_GS['PRESETS']
            if preset not in presets:
                raise serializers.ValidationError(
                    {'preset': [f"Unknown preset. Choose one of {', '.join(sorted(presets))}."]})
            data = {**presets[preset], **data}
        return super().to_internal_value(data)

    def validate(self, attrs):
        """
        Cross-field rules, checked against the TrainConfig defaults for any
        key the document leaves out
        """
        attrs.pop('preset', None)
        merged = {**asdict(TrainConfig()), **attrs}
        errors = {}
        for name in self.LEARNING_RATES:
            if merged[name] <= 0:
                errors[name] = ["Learning rates must be positive."]
        if not 0.0 < merged['mask_threshold'] < 1.0:
            errors['mask_threshold'] = ["Mask threshold must lie in (0, 1)."]
        if merged['rvq_window'] > merged['iterations']:
            errors['rvq_window'] = ["R-VQ window cannot exceed the number of iterations."]
        if merged['hash_max_resolution'] <= merged['hash_min_resolution'] and merged['hash_levels'] > 1:
            errors['hash_max_resolution'] = ["Finest resolution must exceed the coarsest."]
        if errors:
            raise serializers.ValidationError(errors)
        return attrs


class ToySceneSerializer(serializers.Serializer):
    """
    Serializer for synthetic scene descriptions
    """
    mode = serializers.ChoiceField(choices=[('static', 'Static'), ('dynamic', 'Dynamic')], default='static')
    gaussians = serializers.IntegerField(min_value=0, required=False)
    views = serializers.IntegerField(min_value=1, required=False)
    timestamps = serializers.IntegerField(min_value=1, required=False)
    width = serializers.IntegerField(min_value=1, default=32)
    height = serializers.IntegerField(min_value=1, default=32)
    seed = serializers.IntegerField(min_value=0, default=0)
    image_format = serializers.ChoiceField(choices=[('ppm', 'PPM'), ('png', 'PNG')], default='ppm')

    def validate(self, attrs):
        dynamic = attrs['mode'] == 'dynamic'
        attrs.setdefault('gaussians', 2 if dynamic else 3)
        attrs.setdefault('views', 4 if dynamic else 8)
        attrs.setdefault('timestamps', 8 if dynamic else 1)
        if not dynamic and attrs['timestamps'] != 1:
            raise serializers.ValidationError({'timestamps': ["Static scenes have a single timestamp."]})
        return attrs


class StreamRecordSerializer(serializers.Serializer):
    name = serializers.CharField()
    attribute = serializers.CharField()
    shape = serializers.ListField(child=serializers.IntegerField(min_value=0))
    stages = serializers.ListField(child=serializers.DictField(), min_length=1)
    aux_size = serializers.IntegerField(min_value=0)
    size = serializers.IntegerField(min_value=0)

    def validate_stages(self, value):
        if 'stored_dtype' not in value[-1]:
            raise serializers.ValidationError("Codec chain must end with the stored dtype.")
        if any('codec' not in stage for stage in value[:-1]):
            raise serializers.ValidationError("Every codec stage must name its codec.")
        return value


class ManifestSerializer(serializers.Serializer):
    """
    Serializer for the JSON manifest of a compact container
    """
    version = serializers.IntegerField(min_value=0)
    mode = serializers.ChoiceField(choices=[('static', 'Static'), ('dynamic', 'Dynamic')])
    level = serializers.ChoiceField(choices=[('ours', 'Half precision'), ('ours_pp', 'Post-processed')])
    count = serializers.IntegerField(min_value=0)
    background = serializers.ListField(child=serializers.FloatField(), min_length=3, max_length=3,
                                       allow_null=True, required=False)
    codebooks = serializers.DictField(child=serializers.DictField())
    field = serializers.DictField(allow_null=True)
    phi = serializers.DictField(allow_null=True)
    streams = StreamRecordSerializer(many=True)

    def validate(self, attrs):
        names = {stream['name'] for stream in attrs['streams']}
        if len(names) != len(attrs['streams']):
            raise serializers.ValidationError("Stream names must be unique.")
        for name in attrs['codebooks']:
            if f'{name}_indices' not in names or f'{name}_codebook' not in names:
                raise serializers.ValidationError(f"Codebook {name} is missing its streams.")
        return attrs


class ViewMetricsSerializer(serializers.Serializer):
    view = serializers.IntegerField()
    timestamp = serializers.FloatField()
    psnr = serializers.FloatField()
    ssim = serializers.FloatField()


class EvalReportSerializer(serializers.Serializer):
    """
    Serializer for evaluation reports written by the eval command
    """
    views = ViewMetricsSerializer(many=True)
    mean_psnr = serializers.FloatField()
    mean_ssim = serializers.FloatField()
    gaussian_count = serializers.IntegerField()
    storage = serializers.DictField(child=serializers.IntegerField())
    fps = serializers.FloatField()
    image_size = serializers.ListField(child=serializers.IntegerField())
