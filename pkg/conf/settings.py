from pathlib import Path
from environ import Env
import os

BASE_DIR = Path(__file__).resolve().parent.parent

env = Env(
    DEBUG=(bool, False),
    SECRET_KEY=(str, 'secret'),
    LOG_DIR=(str, str(BASE_DIR / 'logs')),
    POEM_RELAX=(float, 0.9),
    POEM_THREADS=(int, 0),
    POEM_FINGERPRINT_LENGTH=(int, 2048),
    POEM_PATH_MAX_LENGTH=(int, 7),
    POEM_EXPLAIN_DEPTH=(int, 10),
    POEM_PARALLEL_MIN_ROWS=(int, 64),
    POEM_POSITIVE_TOKENS=(list, ['1', 'pos', 'positive', 'true', 'yes', 'active']),
    POEM_NEGATIVE_TOKENS=(list, ['0', 'neg', 'negative', 'false', 'no', 'inactive']),
)

env.read_env()

SECRET_KEY = env('SECRET_KEY')

DEBUG = env('DEBUG')

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    'poem',
]

USE_TZ = True

# POEM settings. Every domain function accepts explicit values and only falls
# back to these when called without them.

# Fraction of scheme comparisons that must be better-or-tied for dominance.
POEM_RELAX = env('POEM_RELAX')

# 0 means "all available cores"
POEM_THREADS = env('POEM_THREADS')

POEM_FINGERPRINT_LENGTH = env('POEM_FINGERPRINT_LENGTH')
POEM_PATH_MAX_LENGTH = env('POEM_PATH_MAX_LENGTH')
POEM_EXPLAIN_DEPTH = env('POEM_EXPLAIN_DEPTH')

# Below this many molecules native fingerprints are computed in-process.
POEM_PARALLEL_MIN_ROWS = env('POEM_PARALLEL_MIN_ROWS')

# Case-insensitive label tokens for binary classification datasets.
POEM_POSITIVE_TOKENS = [token.lower() for token in env('POEM_POSITIVE_TOKENS')]
POEM_NEGATIVE_TOKENS = [token.lower() for token in env('POEM_NEGATIVE_TOKENS')]

# Logging Configuration

# Directory for log files in production
LOG_DIR = Path(env('LOG_DIR'))
if not DEBUG and not os.path.exists(LOG_DIR):
    os.makedirs(LOG_DIR, exist_ok=True)

# Determine log level based on DEBUG setting
POEM_LOG_LEVEL = 'DEBUG' if DEBUG else 'INFO'

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} [{levelname}] {name}:{lineno} {message}',
            'style': '{',
        },
    },
    'handlers': {
        # StreamHandler writes to stderr; stdout is reserved for command output
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
        'file': {
            'level': 'INFO',
            'class': 'logging.handlers.RotatingFileHandler',
            'filename': LOG_DIR / 'poem.log',
            'maxBytes': 10 * 1024 * 1024,  # 10MB
            'backupCount': 10,
            'formatter': 'verbose',
            'delay': True,
        },
    },
    'loggers': {
        'poem': {
            'handlers': ['console', 'file'] if not DEBUG else ['console'],
            'level': POEM_LOG_LEVEL,
            'propagate': False,
        },
        'django': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': True,
        },
    },
}
