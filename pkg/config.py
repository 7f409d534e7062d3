import os
import logging
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

class Config:
    """Configuration class for the highway overtaking simulator"""

    # Output
    OUTPUT_DIR = os.getenv('HIGHWAY_OUTPUT_DIR', './results')

    # Scenario presets
    SCENARIO_DIR = os.getenv('HIGHWAY_SCENARIO_DIR', str(Path(__file__).parent / 'scenarios'))
    DEFAULT_SEED = int(os.getenv('DEFAULT_SEED', 1))

    # Logging
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FILE = os.getenv('LOG_FILE', './logs/highway.log')

    @staticmethod
    def setup_logging():
        """Setup logging configuration"""
        log_dir = Path(Config.LOG_FILE).parent
        log_dir.mkdir(parents=True, exist_ok=True)

        logging.basicConfig(
            level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            handlers=[
                logging.FileHandler(Config.LOG_FILE),
                logging.StreamHandler()
            ]
        )

    @staticmethod
    def get_output_dir(override: str = None) -> Path:
        """Output directory, command-line override first"""
        return Path(override or Config.OUTPUT_DIR).resolve()

    @staticmethod
    def validate_config():
        """Validate critical configuration"""
        errors = []

        if not hasattr(logging, Config.LOG_LEVEL.upper()):
            errors.append(f"LOG_LEVEL '{Config.LOG_LEVEL}' is not a logging level")

        if not Path(Config.SCENARIO_DIR).is_dir():
            errors.append(f"Scenario directory not found: {Config.SCENARIO_DIR}")

        try:
            Config.get_output_dir().mkdir(parents=True, exist_ok=True)
        except Exception as e:
            errors.append(f"Cannot create output directory: {e}")

        if errors:
            raise ValueError("Configuration errors: " + "; ".join(errors))

        return True
