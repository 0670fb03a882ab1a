"""
Django settings for tspt_project project.

The project has no web surface: Django provides the management-command
CLI, settings, logging configuration and the ORM that records toy
experiment runs.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get('TSPT_SECRET_KEY', 'tspt-local-cli-key-not-used-for-signing')

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'tensor_adapters',
]


# Database
# https://docs.djangoproject.com/en/5.2/ref/settings/#databases

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.environ.get('TSPT_DB_PATH', BASE_DIR / 'db.sqlite3'),
    }
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

# Default primary key field type
# https://docs.djangoproject.com/en/5.2/ref/settings/#default-auto-field

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Tensor adapter settings (see tensor_adapters/conf.py for defaults)

TSPT = {
    'THREADS': int(os.environ['TSPT_THREADS']) if os.environ.get('TSPT_THREADS') else None,
    'STORAGE_DTYPE': 'f32',
    'DEFAULT_D': 768,
    'DEFAULT_LAYERS': 12,
    'DEFAULT_HEADS': 12,
    'TUBAL_RANK_TOL': 1e-9,
    'ORACLE_LIMIT': 4096,
    'POSTPROCESS_MM3': 1000.0,
    'SWEEP_RANKS': [1, 2, 4, 8, 16, 32],
}


# Logging
# Command output on stdout stays machine-readable; logs go to stderr.

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'stream': 'ext://sys.stderr',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'tensor_adapters': {
            'handlers': ['console'],
            'level': os.environ.get('TSPT_LOG_LEVEL', 'WARNING'),
            'propagate': False,
        },
    },
}
