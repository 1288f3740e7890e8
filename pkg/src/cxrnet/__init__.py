"""Multi-label chest X-ray classification with bottleneck ResNets on a small numpy autograd engine.

Subpackages and modules:

- ``tensor``, ``functional``, ``gradcheck``: reverse-mode autodiff and its finite-difference checker
- ``models``, ``checkpoint``: ResNet variants, probes, the non-image MLP and their on-disk format
- ``training``: loss, ADAM, plateau schedule and the epoch loop
- ``data``: label schema, CSV ingestion, patient splits, augmentation, synthetic corpora
- ``metrics``, ``reports``: AUC, fold aggregation, rank correlation, operating points, report tables
- ``gradcam``: class activation heatmaps
- ``cli``: the ``cxrnet`` command
"""

from cxrnet.checkpoint import export_checkpoint, import_pretrained, load_model, load_probe, read_checkpoint
from cxrnet.errors import CxrNetError
from cxrnet.gradcam import Heatmap, export_heatmap, grad_cam
from cxrnet.metrics import aggregate_folds, label_aucs, mae, roc_auc, spearman_matrix, youden_operating_point
from cxrnet.models import MetaFeatures, ModelConfig, ResNet, build_meta_mlp, build_model, build_probe
from cxrnet.tensor import Tensor, no_grad
from cxrnet.training import ArrayDataset, TrainPlan, bce_loss, train

__version__ = "0.1.0"

__all__ = [
    "ArrayDataset", "CxrNetError", "Heatmap", "MetaFeatures", "ModelConfig", "ResNet", "Tensor", "TrainPlan",
    "aggregate_folds", "bce_loss", "build_meta_mlp", "build_model", "build_probe", "export_checkpoint",
    "export_heatmap", "grad_cam", "import_pretrained", "label_aucs", "load_model", "load_probe", "mae",
    "no_grad", "read_checkpoint", "roc_auc", "spearman_matrix", "train", "youden_operating_point",
]
