import os
import logging
from datetime import datetime

from config.settings import LOG_LEVEL

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logging(output_folder: str, level: str = LOG_LEVEL) -> str:
    """
    Configure logging for one command run.
    Creates a 'logs' folder in the output directory with a timestamped log file;
    warnings and errors are echoed to stderr as well.
    """
    log_folder = os.path.join(output_folder, 'logs')
    os.makedirs(log_folder, exist_ok=True)

    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    log_file = os.path.join(log_folder, f"process_log_{timestamp}.txt")

    console = logging.StreamHandler()
    console.setLevel(logging.WARNING)
    console.setFormatter(logging.Formatter('%(levelname)s: %(message)s'))

    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[logging.FileHandler(log_file, encoding='utf-8'), console],
        force=True,
    )
    print(f"Logging to: {log_file}")
    return log_file
