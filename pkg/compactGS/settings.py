"""
Django settings for compactGS project.

Generated by 'django-admin startproject' using Django 5.2.

For more information on this file, see
https://docs.djangoproject.com/en/5.2/topics/settings/

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# Quick-start development settings - unsuitable for production
# See https://docs.djangoproject.com/en/5.2/howto/deployment/checklist/

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get(
    'COMPACT_GS_SECRET_KEY',
    'django-insecure-c3gs-7q!m0b#kp2v@x4t1f8z&w6r(e9n)j5h-ua3d*lgs',
)

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = os.environ.get('COMPACT_GS_DEBUG', '1') == '1'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.admin',
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'django.contrib.sessions',
    'django.contrib.messages',
    'django.contrib.staticfiles',
    'rest_framework',
    'CompactGaussianSplatting',
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.contrib.sessions.middleware.SessionMiddleware',
    'django.middleware.common.CommonMiddleware',
    'django.middleware.csrf.CsrfViewMiddleware',
    'django.contrib.auth.middleware.AuthenticationMiddleware',
    'django.contrib.messages.middleware.MessageMiddleware',
    'django.middleware.clickjacking.XFrameOptionsMiddleware',
]

ROOT_URLCONF = 'compactGS.urls'

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'context_processors': [
                'django.template.context_processors.request',
                'django.contrib.auth.context_processors.auth',
                'django.contrib.messages.context_processors.messages',
            ],
        },
    },
]

WSGI_APPLICATION = 'compactGS.wsgi.application'


# Database
# https://docs.djangoproject.com/en/5.2/ref/settings/#databases
# Holds the run registry (training runs and compressed artifacts).

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}


# Internationalization
# https://docs.djangoproject.com/en/5.2/topics/i18n/

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True


# Static files (CSS, JavaScript, Images)
# https://docs.djangoproject.com/en/5.2/howto/static-files/

STATIC_URL = 'static/'

# Default primary key field type
# https://docs.djangoproject.com/en/5.2/ref/settings/#default-auto-field

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Logging
# https://docs.djangoproject.com/en/5.2/topics/logging/

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'standard': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'standard',
        },
    },
    'loggers': {
        'CompactGaussianSplatting': {
            'handlers': ['console'],
            'level': os.environ.get('COMPACT_GS_LOG_LEVEL', 'WARNING'),
            'propagate': False,
        },
    },
}


# Compact Gaussian splatting configuration

COMPACT_GS = {
    # Renderer
    'TILE_SIZE': 16,
    'RENDER_WORKERS': 1,
    'BACKGROUND': [0.0, 0.0, 0.0],

    # Training log output (one JSON record per iteration)
    'TRAINING_LOG_DIR': BASE_DIR / 'runs',

    # Container format
    'CONTAINER_MAGIC': b'C3GS',
    'CONTAINER_VERSION': 1,

    # TrainConfig presets; a JSON config document is merged over one of these
    # and validated by TrainConfigSerializer.
    'DEFAULT_PRESET': 'toy',
    'PRESETS': {
        'real': {
            'mode': 'static',
            'iterations': 30000,
            'lambda_mask': 5e-4,
            'mask_lr': 1e-2,
            'field_lr': 1e-2,
            'field_lr_milestones': [5000, 15000, 25000],
            'hash_log2_size': 19,
            'rvq_size': 64,
            'rvq_stages': 6,
        },
        'synthetic': {
            'mode': 'static',
            'iterations': 30000,
            'lambda_mask': 4e-3,
            'mask_lr': 1e-3,
            'field_lr': 1e-3,
            'field_lr_milestones': [25000],
            'hash_log2_size': 16,
            'rvq_size': 64,
            'rvq_stages': 6,
        },
        'dynerf': {
            'mode': 'dynamic',
            'iterations': 25000,
            'lambda_mask': 5e-4,
            'mask_lr': 1e-2,
            'field_lr': 1e-2,
            'field_lr_milestones': [3000, 6000, 9000, 12000, 18000, 21000],
            'hash_log2_size': 14,
            'rvq_size': 256,
            'rvq_stages': 4,
            'temporal_rvq_size': 256,
            'temporal_rvq_stages': 3,
            'densify_until_iter': 9000,
        },
        'technicolor': {
            'mode': 'dynamic',
            'iterations': 25000,
            'lambda_mask': 5e-4,
            'mask_lr': 1e-2,
            'field_lr': 1e-2,
            'field_lr_milestones': [3000, 6000, 9000, 12000, 18000, 21000],
            'hash_log2_size': 16,
            'rvq_size': 256,
            'rvq_stages': 5,
            'temporal_rvq_size': 256,
            'temporal_rvq_stages': 4,
            'densify_until_iter': 9000,
        },
        'toy': {
            'mode': 'static',
            'iterations': 2000,
            'lambda_mask': 5e-4,
            'mask_lr': 1e-2,
            'field_lr': 1e-2,
            'field_lr_milestones': [1000, 1500],
            'hash_levels': 8,
            'hash_max_resolution': 256,
            'hash_log2_size': 12,
            'rvq_size': 16,
            'rvq_stages': 2,
            'rvq_window': 200,
            'densify_from_iter': 200,
            'densify_until_iter': 1500,
            'densify_interval': 100,
            'opacity_reset_interval': 3000,
        },
    },
}
