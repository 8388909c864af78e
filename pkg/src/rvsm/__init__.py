"""Sparse Bayesian semantic mapping of labeled 3D point clouds.

A relevance vector machine per class, trained by sequential basis selection
with a Laplace-approximated evidence, combined one-vs-rest into a continuous
map that can be queried at any location.
"""

from .data_io import (ClassDictionary, ClassInfo, LabeledPointCloud, SyntheticSceneSpec, generate_scene,
                      load_cloud, load_points, save_cloud)
from .errors import (AlignmentError, ClassNotPresentError, CloudFormatError, DegenerateInitializationError,
                     InvalidInputError, ModeSearchError, RvsmError, TwoClassRequiredError,
                     UndefinedMetricError)
from .kernel import KernelSpec, basis_vector, design_matrix, kernel_eval, kernel_matrix
from .metrics import EvalReport, auc, evaluate_map, mean_sensitivity
from .multiclass_map import (MapPosterior, SemanticMapModel, downsample_per_class, query_map,
                             split_one_vs_rest, train_map)
from .sparse_bayes import (BinaryRvmModel, TrainConfig, TrainingSet, TrainReport, evaluate_hyperparameter,
                           find_mode, log_marginal_likelihood, predict_binary, train_binary, update_model)

__version__ = "0.1.0"
