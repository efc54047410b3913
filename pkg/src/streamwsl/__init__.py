"""Stream-based weakly-supervised object detection: detector, scoring, AL/SSL policies and a synthetic harness."""

from .active import AlPolicyConfig, BudgetState, Decision, adaptive_window, pool_select_kmeans, pool_select_uniform, stream_decide
from .detector import DetectorModel, MinibootstrapParams, detect, load_model, minibootstrap_train, nystrom_fit, save_model
from .errors import ConfigError, ContractViolation, InvalidInputError, TrainingError
from .frames import Frame, read_frames, write_frames
from .geometry import Annotation, BoundingBox, Detection, iou, map_score, nms, per_class_ap, voc_ap_2007
from .harness import WorldConfig, generate_world, shift_report
from .pipeline import (
    GroundTruthOracle,
    LabeledSet,
    UnlabeledStream,
    evaluate,
    supervised_phase,
    weakly_supervised_phase,
)
from .scoring import ConsistencyScore, UncertaintyScore, civ_score, uncertainty_score
from .semisup import SslConfig, ss_decide

__version__ = "0.1.0"
