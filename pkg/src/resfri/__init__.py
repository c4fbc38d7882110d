"""Filter-relationship residual blocks on a small numpy autodiff core."""

from .block import FusionMode, GroupPlan, ResFRIBlock, ResFRIBlockConfig, default_pruning_ratio
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import load_config, make_config, save_config
from .data import AugmentPolicy, Dataset, batches, load_dataset, parse_cifar, parse_idx
from .errors import (ConfigError, DataError, FormatError, NumericError, ResFRIError, ShapeError,
                     UsageError)
from .network import (Network, NetworkConfig, build_network, count_flops, count_params,
                      desk_config, mnist_config)
from .optim import SGD, PlateauScheduler, sgd_step
from .pruning import PruningMask, apply_mask, build_mask, num_to_prune
from .tensor import Tensor, backward, no_grad
from .trainer import TrainConfig, Trainer, evaluate, metrics, train

__version__ = "0.1.0"
