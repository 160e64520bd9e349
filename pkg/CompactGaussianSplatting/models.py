from django.db import models


class TrainingRun(models.Model):
    """
    One training run: its configuration, outcome and output directory
    """
    MODE_CHOICES = [
        ('static', 'Static'),
        ('dynamic', 'Dynamic'),
    ]

    STATUS_CHOICES = [
        ('running', 'Running'),
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]

    name = models.CharField(max_length=200)
    mode = models.CharField(max_length=10, choices=MODE_CHOICES, default='static')
    seed = models.IntegerField(default=0)
    config = models.JSONField(default=dict)
    iterations = models.IntegerField(default=0)
    final_psnr = models.FloatField(null=True, blank=True)
    final_ssim = models.FloatField(null=True, blank=True)
    gaussian_count = models.IntegerField(null=True, blank=True)
    output_dir = models.CharField(max_length=500)
    status = models.CharField(max_length=10, choices=STATUS_CHOICES, default='running')
    error_message = models.TextField(blank=True, null=True)
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    def __str__(self):
        return f"{self.name} ({self.get_mode_display()}, {self.get_status_display()})"

    def mark_completed(self, final_metrics):
        self.final_psnr = final_metrics['psnr']
        self.final_ssim = final_metrics['ssim']
        self.gaussian_count = final_metrics['N']
        self.status = 'completed'
        self.save()

    def mark_failed(self, error_message):
        self.status = 'failed'
        self.error_message = error_message
        self.save()

    class Meta:
        ordering = ['-created_at']


class CompressedArtifact(models.Model):
    """
    A compact container written from a training run
    """
    LEVEL_CHOICES = [
        ('ours', 'Half precision'),
        ('ours_pp', 'Post-processed'),
    ]

    run = models.ForeignKey(
        TrainingRun,
        on_delete=models.CASCADE,
        null=True,
        blank=True,
        related_name='artifacts'
    )
    level = models.CharField(max_length=10, choices=LEVEL_CHOICES, default='ours')
    path = models.CharField(max_length=500)
    size_bytes = models.BigIntegerField(default=0)
    attribute_sizes = models.JSONField(default=dict)
    gaussian_count = models.IntegerField(default=0)
    created_at = models.DateTimeField(auto_now_add=True)

    def __str__(self):
        return f"{self.path} ({self.get_level_display()}, {self.size_bytes} bytes)"

    @property
    def bytes_per_gaussian(self):
        return self.size_bytes / self.gaussian_count if self.gaussian_count else 0.0

    class Meta:
        ordering = ['-created_at']
