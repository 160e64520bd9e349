"""
URL configuration for compactGS project.

The project is driven from management commands; the only HTTP surface is the
admin site, which lists the run registry (training runs and compressed
artifacts).
"""
from django.contrib import admin
from django.urls import path

urlpatterns = [
    path('admin/', admin.site.urls),
]
