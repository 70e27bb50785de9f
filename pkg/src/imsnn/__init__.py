"""ISI-modulated spiking neural networks in numpy."""

from .backprop import SuppressionMode, backward
from .dynamics import (
    DegenerateOutputError,
    GaussianSynapse,
    isi_update,
    membrane_step,
    output_probabilities,
    synapse_weight,
)
from .encoding import EncoderConfig, encode
from .network import (
    Network,
    forward_pass,
    init_network,
    load_network,
    parse_architecture,
    save_network,
)
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"
