"""
Configuration management for the application
"""
import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Base paths
PROJECT_ROOT = Path(__file__).parent.parent
CONFIG_DIR = PROJECT_ROOT / "config"
DEFAULT_CONFIG_FILE = CONFIG_DIR / "give_defaults.yaml"
DATA_DIR = Path(os.getenv("GIVE_DATA_DIR", str(PROJECT_ROOT / "data")))
RUNS_DIR = Path(os.getenv("GIVE_RUNS_DIR", str(PROJECT_ROOT / "runs")))
LOG_DIR = Path(os.getenv("GIVE_LOG_DIR", "logs"))

# Reproducibility
DEFAULT_SEED = int(os.getenv("GIVE_SEED", "17"))

# NaN/Inf checks after every tensor op (slow, off for normal runs)
DEBUG_FINITE = os.getenv("GIVE_DEBUG_FINITE", "0") == "1"

# Special tokens, always the first vocabulary lines
PAD_TOKEN = "<pad>"
EOS_TOKEN = "<eos>"
MAX_TOKENS = 16

# Scene vocabulary
COLORS = ["red", "green", "blue", "yellow"]
SHAPES = ["circle", "square", "triangle", "cross"]

COLOR_RGB = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (40, 60, 220),
    "yellow": (230, 220, 40),
}

SIZE_WORDS = {"salient": "big", "other": "small"}
POSITION_WORDS = ["middle", "top", "bottom", "left", "right"]

# Caption templates, indexed by template id
CAPTION_TEMPLATES = [
    "a {size} {color} {shape} near the {position}",
    "there is a {size} {color} {shape} at the {position}",
    "a photo of a {size} {color} {shape} in the {position}",
    "the {position} has a {size} {color} {shape}",
]

# Instruction template wrapping an object name
PROMPT_TEMPLATE = "a photo of {object}"

# Canvas
IMAGE_SIZE = 64
BACKGROUND_RANGE = (96, 160)
