import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Logging Configuration
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')

# Reproducibility: fallback master seed when neither --seed nor the config sets one
DDTRACK_SEED = int(os.getenv('DDTRACK_SEED', '0'))

# Tracking Configuration
DDTRACK_WORKERS = int(os.getenv('DDTRACK_WORKERS', '1'))
TRACK_BATCH_SIZE = int(os.getenv('TRACK_BATCH_SIZE', '64'))

# Template Configuration
TEMPLATE_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), 'templates')

TOOL_VERSION = '0.3.0'
