# config.py
import os
from dotenv import load_dotenv

basedir = os.path.abspath(os.path.dirname(os.path.dirname(__file__)))
load_dotenv()


class Config:
    OUTPUT_ROOT = os.environ.get("PPTFL_OUTPUT_ROOT") or os.path.join(basedir, "runs")
    LOG_LEVEL = os.environ.get("PPTFL_LOG_LEVEL") or "INFO"
    WORKERS = int(os.environ.get("PPTFL_WORKERS") or 1)
    REPETITIONS = int(os.environ.get("PPTFL_REPETITIONS") or 20)
    DEBUG = False


class DevelopmentConfig(Config):
    DEBUG = True
    LOG_LEVEL = os.environ.get("PPTFL_LOG_LEVEL") or "DEBUG"


class ProductionConfig(Config):
    DEBUG = False
    WORKERS = int(os.environ.get("PPTFL_WORKERS") or os.cpu_count() or 1)


class TestingConfig(Config):
    OUTPUT_ROOT = os.environ.get("PPTFL_OUTPUT_ROOT") or os.path.join(basedir, "runs", "test")
    REPETITIONS = 3
    WORKERS = 1


config = {
    "development": DevelopmentConfig,
    "production": ProductionConfig,
    "testing": TestingConfig,
    "default": DevelopmentConfig
}


def get_config(name=None):
    """Return the settings class selected by name or by PPTFL_ENV."""
    name = name or os.environ.get("PPTFL_ENV") or "default"
    return config.get(name, config["default"])
