# backend/constants.py
"""
Constants for the zero-shot-from-scratch (ZFS) toolkit.

DATASET MANIFESTS:
==================
Counts every loader checks a dataset root against. Class indices are 0-based
and the split is the standard ZSL split shipped next to the images.

PIXEL ENCODING:
===============
Images are resized to 128x128, cropped to 112x112 and mapped to [-1, 1]
with mean 0.5 / std 0.5. Every run records these values in its metadata.

Environment Variables:
ZFS_DATA_ROOT=/data/zsl
ZFS_RESULTS_DIR=results
ZFS_ZFS_STRICT=true
"""
from typing import Dict, Any, List, Tuple
from dotenv import load_dotenv
load_dotenv()

VERSION = "1.0.0"

# ==========================================
# DATASETS
# ==========================================

DATASET_MANIFESTS: Dict[str, Dict[str, int]] = {
    'CUB': {'images': 11788, 'attributes': 312, 'classes': 200, 'train': 150, 'test': 50, 'parts': 15},
    'AWA2': {'images': 30475, 'attributes': 85, 'classes': 50, 'train': 40, 'test': 10, 'parts': 0},
    'SUN': {'images': 14340, 'attributes': 102, 'classes': 717, 'train': 645, 'test': 72, 'parts': 0},
}

IMAGES_FILE = "images.txt"
ATTRIBUTES_FILE = "attributes.txt"
SPLIT_FILE = "split.txt"
PARTS_FILE = "parts.txt"
IMAGES_DIR = "images"

# ==========================================
# PREPROCESSING
# ==========================================

RESIZE_SIDE = 128
CROP_SIDE = 112  # 0.875 * 128
MAX_CROP_OFFSET = RESIZE_SIDE - CROP_SIDE
EVAL_CROP_OFFSET: Tuple[int, int] = (MAX_CROP_OFFSET // 2, MAX_CROP_OFFSET // 2)
PIXEL_MEAN = 0.5
PIXEL_STD = 0.5
PIXEL_RANGE: Tuple[float, float] = (-1.0, 1.0)

PART_SQUARE_SIDE = 10
# center convention: [c - 5, c + 4] on each axis
PART_SQUARE_BEFORE = PART_SQUARE_SIDE // 2
PART_SQUARE_AFTER = PART_SQUARE_SIDE - PART_SQUARE_BEFORE - 1

# ==========================================
# ENCODERS
# ==========================================

GLOBAL_DIM = 1024
LOCAL_TAP_LAYER = 2

# (out_channels, kernel, stride, padding, pool_kernel, pool_stride)
BASIC_CONV_TABLE: List[Tuple[int, int, int, int, int, int]] = [
    (64, 4, 2, 1, 0, 0),
    (128, 4, 2, 1, 0, 0),
    (256, 4, 2, 1, 0, 0),
    (512, 4, 2, 1, 0, 0),
    (1024, 4, 2, 1, 0, 0),
]
BASIC_HEAD_DIMS: List[int] = []

ALEXNET_CONV_TABLE: List[Tuple[int, int, int, int, int, int]] = [
    (96, 3, 1, 1, 3, 2),
    (192, 3, 1, 1, 3, 2),
    (384, 3, 1, 1, 0, 0),
    (384, 3, 1, 1, 0, 0),
    (192, 3, 1, 1, 3, 2),
    (192, 3, 1, 1, 3, 2),
]
ALEXNET_HEAD_DIMS: List[int] = [4096, 4096]

CHECKPOINT_FORMAT_VERSION = 1
ZFS_PROVENANCE_MARKER = "zfs-toolkit"

# ==========================================
# PRETRAINING
# ==========================================

DEFAULT_LR = 1e-4
DEFAULT_BATCH_SIZE = 64
DEFAULT_TRAIN_STEPS = 2000
DEFAULT_LOG_EVERY = 50
DEFAULT_BVAE_BETA = 4.0
VAE_LATENT_DIM = 128
LOGVAR_CLAMP: Tuple[float, float] = (-8.0, 8.0)
INFOMAX_EMBED_DIM = 256
SCORE_CLIP = 20.0
CMDIM_MATCH_PROBS: List[float] = [1.0, 0.5, 0.1]
AC_THRESHOLD = 0.0
LOCAL_LOSS_WEIGHT = 1.0
AMDIM_JITTER = {'brightness': 0.4, 'contrast': 0.4, 'saturation': 0.4}

# ==========================================
# EVALUATION
# ==========================================

PROTO_EMBED_DIM = 512
PROTO_HIDDEN_DIM = 512
PROTO_STEPS = 1000
PROTO_BATCH_SIZE = 128
LOCAL_SAMPLES_PER_IMAGE = 16
PROBE_THRESHOLD = 0.5
PROBE_STEPS = 500

# ==========================================
# MI ANALYSIS
# ==========================================

STATNET_HIDDEN_DIM = 512
MINE_STEPS = 3000
MINE_BATCH_SIZE = 256
MINE_LR = 1e-3
MINE_DIVERGENCE_LIMIT = 1e4
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_DATA_RANGE = 1.0
GRAYSCALE_WEIGHTS: Tuple[float, float, float] = (0.299, 0.587, 0.114)
STUDY_PAIRS_FULL = 20000
STUDY_PAIRS_DESK = 2000

# ==========================================
# COMPOSITIONALITY
# ==========================================

TRE_LR = 1e-2
TRE_STEPS = 2000
TRE_INIT_STD = 0.01
TRE_RANDOM_DRAWS = 3
TRE_TOLERANCE = 1e-5
TRE_PATIENCE = 100
TRE_DENOMINATOR_EPS = 1e-8

# ==========================================
# HARNESS
# ==========================================

CLI_COMMANDS: List[str] = [
    'gen-synthetic', 'train', 'eval-zsl', 'probe-parts', 'mi-train',
    'mi-viz', 'mi-study', 'tre', 'grid', 'report',
]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_ZFS_VIOLATION = 3

RESULTS_COLUMNS: List[str] = [
    'run_id', 'fingerprint', 'dataset', 'objective', 'encoder', 'local_loss',
    'seed', 'metric', 'value', 'wall_time', 'code_version',
]

# --device-budget presets: overrides applied on top of the run config
DEVICE_BUDGETS: Dict[str, Dict[str, Dict[str, float]]] = {
    "desk": {
        "run": {"encoder_width": 0.25},
        "training": {"steps": 300, "batch_size": 32},
        "protonet": {"steps": 300},
        "probes": {"steps": 200},
        "mine": {"steps": 1000},
        "tre": {"steps": 500},
        "study": {"pairs": STUDY_PAIRS_DESK},
    },
    "full": {
        "run": {},
        "training": {},
        "protonet": {},
        "probes": {},
        "mine": {},
        "tre": {},
        "study": {"pairs": STUDY_PAIRS_FULL},
    },
}

# ==========================================
# REFERENCE NUMBERS (full-scale runs on CUB)
# ==========================================

# top-1 (%) keyed by (objective label, encoder, local loss)
REFERENCE_ZSL_CUB: Dict[Tuple[str, str, str], float] = {
    ('fc', 'basic', 'none'): 27.44, ('fc', 'basic', 'ac'): 32.17, ('fc', 'basic', 'lc'): 30.44,
    ('vae', 'basic', 'none'): 12.13, ('vae', 'basic', 'ac'): 13.46, ('vae', 'basic', 'lc'): 10.27,
    ('bvae', 'basic', 'none'): 12.03, ('bvae', 'basic', 'ac'): 12.85, ('bvae', 'basic', 'lc'): 12.52,
    ('aae', 'basic', 'none'): 9.12, ('aae', 'basic', 'ac'): 12.36, ('aae', 'basic', 'lc'): 9.80,
    ('dim', 'basic', 'none'): 24.42, ('dim', 'basic', 'ac'): 32.54, ('dim', 'basic', 'lc'): 29.17,
    ('amdim', 'basic', 'none'): 24.42, ('amdim', 'basic', 'ac'): 30.29, ('amdim', 'basic', 'lc'): 28.83,
    ('cmdim_p1', 'basic', 'none'): 29.24, ('cmdim_p1', 'basic', 'ac'): 30.08, ('cmdim_p1', 'basic', 'lc'): 30.04,
    ('cmdim_p0.5', 'basic', 'none'): 29.67, ('cmdim_p0.5', 'basic', 'ac'): 35.15, ('cmdim_p0.5', 'basic', 'lc'): 31.06,
    ('cmdim_p0.1', 'basic', 'none'): 27.03, ('cmdim_p0.1', 'basic', 'ac'): 32.35, ('cmdim_p0.1', 'basic', 'lc'): 31.14,
    ('pn', 'basic', 'none'): 26.29,
    ('fc', 'alexnet', 'none'): 30.47, ('fc', 'alexnet', 'ac'): 34.92, ('fc', 'alexnet', 'lc'): 32.40,
    ('cmdim_p1', 'alexnet', 'none'): 35.80, ('cmdim_p1', 'alexnet', 'ac'): 40.11, ('cmdim_p1', 'alexnet', 'lc'): 32.31,
    ('pn', 'alexnet', 'none'): 37.59,
}

# parts F1, basic encoder, keyed by (objective label, local loss)
REFERENCE_PARTS_F1_CUB: Dict[Tuple[str, str], float] = {
    ('fc', 'none'): 0.198, ('fc', 'ac'): 0.368, ('fc', 'lc'): 0.284,
    ('vae', 'none'): 0.07, ('bvae', 'none'): 0.067, ('aae', 'none'): 0.086,
    ('dim', 'none'): 0.235, ('amdim', 'none'): 0.311, ('amdim', 'ac'): 0.406,
    ('cmdim_p1', 'none'): 0.313, ('cmdim_p1', 'ac'): 0.406,
    ('cmdim_p0.5', 'none'): 0.295, ('cmdim_p0.1', 'none'): 0.315, ('pn', 'none'): 0.288,
}

# TRE ratio, basic encoder, no local loss
REFERENCE_TRE_RATIO_CUB: Dict[str, float] = {
    'fc': 0.761, 'vae': 1.062, 'bvae': 1.04, 'aae': 1.011,
    'dim': 0.771, 'amdim': 0.881, 'cmdim_p1': 0.639,
}

REFERENCE_PARTS_ZSL_PEARSON = 0.73
REFERENCE_TRE_ZSL_PEARSON: Dict[str, float] = {'CUB': -0.90, 'AWA2': -0.60, 'SUN': -0.30}
# receptive fields quoted for the alexnet final-pool taps; computed geometry is reported instead
QUOTED_ALEXNET_POOL_RF: Tuple[int, int] = (65, 85)

ANCHOR_TOLERANCES: Dict[str, float] = {'zsl': 3.0, 'parts_f1': 0.05, 'tre_ratio': 0.08}
