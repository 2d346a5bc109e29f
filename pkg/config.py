import os

# Try to load environment variables, but don't fail if .env doesn't exist
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    # dotenv not installed, that's okay
    pass

# Storage location
CORPUS_DIR = os.getenv("MITOSIS_CORPUS_DIR", "corpus")

# Logging
LOG_LEVEL = os.getenv("MITOSIS_LOG_LEVEL", "WARNING")
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

# Torch intra-op threads (0 leaves torch's default)
NUM_THREADS = int(os.getenv("MITOSIS_NUM_THREADS", "0"))

# File format versions
CORPUS_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1

# Corpus file names
CORPUS_META_FILE = "meta.json"
CORPUS_ANNOTATIONS_FILE = "annotations.json"
CORPUS_IMAGES_DIR = "images"

# Run artifact file names
CHECKPOINT_FILE = "checkpoint.pt"
HISTORY_FILE = "history.csv"
MANIFEST_FILE = "manifest.json"
PREDICTIONS_FILE = "predictions.json"
REPORT_FILE = "report.json"
REPORT_TEXT_FILE = "report.txt"
TRANSFER_REPORT_FILE = "transfer_report.json"
TRANSFER_GALLERY_FILE = "transfer_gallery.png"

# Domain constants
NUM_TRAINING_DOMAINS = 4
HELD_OUT_DOMAIN = 4
BOX_SIDE = 50
PATCH_SIZE = 128
TRANSFER_PATCH_SIZE = 64
