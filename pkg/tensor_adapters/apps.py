from django.apps import AppConfig


class TensorAdaptersConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'tensor_adapters'
