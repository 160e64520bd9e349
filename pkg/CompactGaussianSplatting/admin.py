from django.contrib import admin
from .models import TrainingRun, CompressedArtifact


@admin.register(TrainingRun)
class TrainingRunAdmin(admin.ModelAdmin):
    list_display = ['name', 'mode', 'status', 'iterations', 'final_psnr',
                    'gaussian_count', 'created_at']
    list_filter = ['mode', 'status', 'created_at']
    search_fields = ['name', 'output_dir']
    readonly_fields = ['created_at', 'updated_at']


@admin.register(CompressedArtifact)
class CompressedArtifactAdmin(admin.ModelAdmin):
    list_display = ['path', 'level', 'size_bytes', 'gaussian_count', 'run', 'created_at']
    list_filter = ['level', 'created_at']
    search_fields = ['path', 'run__name']
