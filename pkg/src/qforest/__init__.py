"""Forest tensor network classifiers and their exact quantum-circuit embedding.

Typical pipeline::

    model, log = train_ftn(FTNClassifier.random(16, 1, 10, init="averaging"), data, TrainConfig())
    circuits = embed_ftn(canonicalize_ftn(model))          # exact at w = 0
    encoded, trajectory = adiabatic_encode(circuits, data, EncodeConfig())  # w -> 1
"""

from .adiabatic import (
    DirectConfig,
    EncodeConfig,
    EncodeTrajectory,
    adiabatic_encode,
    haar_random_init,
    haar_random_qftn,
    riemannian_grad,
    retract,
    train_direct,
)
from .container import load_model, save_model
from .data_io import ImageDataset, downscale, load_cifar10, load_mnist
from .embedding import QFTNModel, QTTNCircuit, block_encode_top, embed_ftn, isometry_to_unitary
from .errors import QForestError
from .ftn import (
    FTNClassifier,
    TrainConfig,
    canonicalize_ftn,
    evaluate,
    ftn_forward,
    loss_and_grad,
    predict,
    train_ftn,
)
from .qsim import qftn_evaluate, qftn_forward, qftn_loss_and_grad, qttn_forward
from .ttn import TTNClassifier, build_topology, canonicalize, ttn_forward

__version__ = "0.1.0"
