from .adam import Adam, adam_step
from .checkpoint import load_network, save_network
from .gradcheck import GradCheckReport, check_layer, gradient_check
from .layers import (
    BatchNorm,
    Conv2D,
    Deconv2D,
    Dense,
    Dropout,
    LeakyReLU,
    MissingCacheError,
    Reshape,
    ShapeError,
    Sigmoid,
    backward,
    forward,
)
from .network import Network, make_rng
