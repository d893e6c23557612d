"""
Runtime Configuration for the PowerSplit Workbench
Handles environment variables, defaults and validation of run-time settings
"""

import os
from typing import Optional, Type

from dotenv import load_dotenv

from services.errors import ConfigError

# Load environment variables from .env file
load_dotenv()


class Config:
    """Base configuration class with workbench defaults"""

    ENV = os.environ.get('POWERSPLIT_ENV', 'development')

    # Logging Configuration
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')
    LOG_FILE = os.environ.get('LOG_FILE') or None
    LOG_FORMAT = os.environ.get('LOG_FORMAT', 'console')

    # Output Configuration
    OUTPUT_DIR = os.environ.get('OUTPUT_DIR', 'runs')

    # Solver Configuration
    LP_TOLERANCE = float(os.environ.get('LP_TOLERANCE', 1e-7))
    LP_MAX_ITER = int(os.environ.get('LP_MAX_ITER', 50000))
    LP_PRICING = os.environ.get('LP_PRICING', 'dantzig')

    # Controller Configuration
    DEFAULT_HORIZON = int(os.environ.get('DEFAULT_HORIZON', 96))
    DEFAULT_SEED = int(os.environ.get('DEFAULT_SEED', 0))

    # Parallel scenario runs (compare / sweep)
    MAX_WORKERS = int(os.environ.get('MAX_WORKERS', 1))

    @classmethod
    def validate_config(cls) -> bool:
        """Validate that configuration values are within their allowed ranges"""
        problems = []

        if cls.LOG_LEVEL.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            problems.append(f"LOG_LEVEL={cls.LOG_LEVEL}")
        if cls.LOG_FORMAT not in ('console', 'json'):
            problems.append(f"LOG_FORMAT={cls.LOG_FORMAT}")
        if not 0 < cls.LP_TOLERANCE < 1e-2:
            problems.append(f"LP_TOLERANCE={cls.LP_TOLERANCE}")
        if cls.LP_MAX_ITER < 1:
            problems.append(f"LP_MAX_ITER={cls.LP_MAX_ITER}")
        if cls.LP_PRICING not in ('dantzig', 'bland'):
            problems.append(f"LP_PRICING={cls.LP_PRICING}")
        if cls.DEFAULT_HORIZON < 1:
            problems.append(f"DEFAULT_HORIZON={cls.DEFAULT_HORIZON}")
        if cls.MAX_WORKERS < 1:
            problems.append(f"MAX_WORKERS={cls.MAX_WORKERS}")

        if problems:
            raise ConfigError(
                f"Invalid environment configuration: {', '.join(problems)}",
                invalid=problems,
            )

        return True


class DevelopmentConfig(Config):
    """Development environment configuration"""
    ENV = 'development'
    LOG_LEVEL = 'DEBUG'


class ProductionConfig(Config):
    """Batch / CI environment configuration"""
    ENV = 'production'
    LOG_FORMAT = 'json'


class TestingConfig(Config):
    """Testing environment configuration"""
    ENV = 'testing'
    LOG_LEVEL = 'WARNING'
    LOG_FILE = None
    DEFAULT_HORIZON = 16


# Configuration mapping
config_map = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': DevelopmentConfig
}


def get_config(env: Optional[str] = None) -> Type[Config]:
    """Get configuration based on environment"""
    env = env or os.environ.get('POWERSPLIT_ENV', 'development')
    return config_map.get(env, config_map['default'])
