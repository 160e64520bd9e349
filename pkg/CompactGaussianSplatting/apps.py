from django.apps import AppConfig


class CompactgaussiansplattingConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'CompactGaussianSplatting'
    verbose_name = 'Compact Gaussian Splatting'
