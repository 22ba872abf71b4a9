from django.apps import AppConfig


class PoemConfig(AppConfig):
    name = 'poem'
    verbose_name = 'Pareto-Optimal Embedded Modeling'
