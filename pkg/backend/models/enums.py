# backend/models/enums.py
from enum import Enum

class ObjectiveKind(str, Enum):
    """Pretraining objective."""
    FC = "fc"
    VAE = "vae"
    BVAE = "bvae"
    AAE = "aae"
    DIM = "dim"
    AMDIM = "amdim"
    CMDIM = "cmdim"
    PN = "pn"

class LocalLoss(str, Enum):
    NONE = "none"
    AC = "ac"
    LC = "lc"

class EncoderFamily(str, Enum):
    BASIC = "basic"
    ALEXNET = "alexnet"

class Estimator(str, Enum):
    """Mutual-information lower bound used by the infomax objectives."""
    DV = "dv"
    NCE = "nce"
    JSD = "jsd"

class AggregationMode(str, Enum):
    AVERAGE_REPRESENTATIONS = "average_representations"
    AVERAGE_PREDICTIONS = "average_predictions"

class PoolTap(str, Enum):
    PRE_POOL = "pre_pool"
    POST_POOL = "post_pool"

class PreprocessMode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"

class ReportTable(str, Enum):
    ZSL = "zsl"
    PARTS = "parts"
    TRE = "tre"
    LOCAL = "local"
