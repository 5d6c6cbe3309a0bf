"""Dense multi-scale local features for joint keypoint detection, description and place retrieval."""
from .data import ManifestEntry, PairRecord, SceneSpec, Triplet, generate_city, mine_triplets
from .decoder import DecodedImage, Keypoint
from .errors import ConfigError, DenserNetError, FormatError, NumericalError, ShapeError, ValidationError
from .evaluation import build_index, matching_metrics, recall_at_n
from .model import DenserNet, PixelDecoder
from .network import NetworkConfig
from .objective import TrainConfig, gradcheck, train, triplet_loss

__version__ = "0.1.0"
