"""
Configuration settings for camfit
"""

import logging
import os
from typing import Optional

import torch

def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() in ("1", "true", "yes", "on")

class Config:
    """Process-level configuration read from ANYCAM_* environment variables"""

    # Worker parallelism (0 keeps the torch default)
    THREADS = int(os.getenv("ANYCAM_THREADS", "0"))

    # Progress bars on long optimization loops
    PROGRESS = _env_flag("ANYCAM_PROGRESS", "false")

    # Logging Settings
    LOG_LEVEL = os.getenv("ANYCAM_LOG_LEVEL", "INFO")
    LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    @classmethod
    def configure_logging(cls) -> None:
        """Install the root handler once"""
        logging.basicConfig(level=getattr(logging, cls.LOG_LEVEL.upper(), logging.INFO), format=cls.LOG_FORMAT)

    @classmethod
    def apply_threads(cls) -> None:
        """Cap torch worker threads when ANYCAM_THREADS is set"""
        if cls.THREADS > 0:
            torch.set_num_threads(cls.THREADS)

# Development configuration
class DevelopmentConfig(Config):
    """Development configuration"""
    LOG_LEVEL = os.getenv("ANYCAM_LOG_LEVEL", "DEBUG")
    PROGRESS = _env_flag("ANYCAM_PROGRESS", "true")

# Production configuration
class ProductionConfig(Config):
    """Production configuration"""
    LOG_LEVEL = os.getenv("ANYCAM_LOG_LEVEL", "WARNING")

# Testing configuration
class TestingConfig(Config):
    """Testing configuration"""
    LOG_LEVEL = "DEBUG"
    PROGRESS = False
    THREADS = 1

# Configuration mapping
config_map = {
    "development": DevelopmentConfig,
    "production": ProductionConfig,
    "testing": TestingConfig,
}

def get_config(environment: Optional[str] = None) -> Config:
    """Get configuration for the specified environment"""
    if environment is None:
        environment = os.getenv("ANYCAM_ENV", "production")

    return config_map.get(environment, ProductionConfig)
