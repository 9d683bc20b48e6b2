from .model import EncodedScene, LatgeoModel
from .factory import build_model
