from django.apps import AppConfig


class ConvexConfig(AppConfig):
    name = 'convex'
    verbose_name = 'Input-convex networks and convex MPC'
