"""Naive Bayes nearest-neighbour and scalable non-linear learning over bags of patch descriptors."""
from .core import (Dataset, FeatureBag, FormatError, InvalidInputError,
                   InvalidParameterError, NumericalFailureError,
                   PrototypeTensor, StandardizationStats, apply_standardizer,
                   cap_norm, fit_standardizer, nearest_neighbor)
from .evaluation import EvalReport, da_run, evaluate, fit_model, split_dataset
from .i2c import (NbnnModel, build_support, check_nbnl_bound, i2c_distance,
                  nbnl_predict, nbnl_scores, nbnn_predict)
from .ml3 import class_scores, grad_phi, loss_gradient, phi, softmax_loss
from .stoml3 import (TrainerState, TrainReport, init_trainer, step,
                     step_minibatch, surrogate_value, train)

__version__ = "0.1.0"
