"""
Django settings for convex_control project.

The project has no HTTP surface: Django hosts the management commands,
the test runner, logging and the toolkit defaults below.

For more information on this file, see
https://docs.djangoproject.com/en/4.2/topics/settings/
"""

from pathlib import Path

from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Required by Django even without sessions or signing.
SECRET_KEY = config('SECRET_KEY', default='convex-control-local-only')

DEBUG = config('DEBUG', default=False, cast=bool)


# Application definition

INSTALLED_APPS = [
    'rest_framework',
    'convex',
]


# Logging

LOG_LEVEL = config('CONVEX_LOG_LEVEL', default='INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'convex': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
}


# Toolkit defaults
# Precedence for commands: flags > --config file > these values.

CONVEX_CONTROL = {
    'seed': config('CONVEX_SEED', default=0, cast=int),
    'icnn': {
        'widths': [16],
        'epochs': 200,
        'lr': 1e-3,
        'batch_size': 512,
        'log_every': 20,
    },
    'icrnn': {
        'hidden': 32,
        'window': 12,
        'epochs': 60,
        'lr': 1e-3,
        'batch_size': 512,
        'log_every': 10,
        'delta': False,
    },
    'circles': {
        'n': 100,
        'radii': [0.5, 1.0],
        'noise': 0.05,
        'widths': [200, 200],
        'epochs': 400,
        'lr': 1e-3,
        'batch_size': 100,
    },
    'mpc': {
        'horizon': 36,
        'max_iters': config('CONVEX_MAX_ITERS', default=2000, cast=int),
        'tol': 1e-6,
        'lr': 0.05,
        'lr_decay_steps': 200,
        'restarts': 3,
        'penalty_weight': 10.0,
        'penalty_rounds': 3,
        'violation_threshold': 1e-3,
        'shooting_k': 100,
    },
    'sysid': {
        'noise_sigma': 0.001,
        'mix': 0.1,
        'dagger_iters': 6,
        'train_ratio': 10 / 12,
    },
    'building': {
        'zones': 4,
        'days_per_month': 30,
        'comfort_band': [19.0, 24.0],
        'fixed_setpoint': 22.0,
        'episode': 144,
    },
    # 'horizon' is the MPC planning horizon, 'episode' the closed-loop length
    'point_mass': {
        'horizon': 10,
        'episode': 200,
        'reward_c': 0.5,
        'reward_alpha': 50.0,
    },
    'battery': {
        'horizon': 5,
        'episode': 24,
        'target_charge': 0.8,
    },
    'tou': {
        'peak': 0.3,
        'off_peak': 0.1,
        'peak_start': 17.0,
        'peak_end': 21.0,
    },
}
