"""maskdiff: cluster-conditioned diffusion inpainting for synthetic labeled
segmentation data, with loss-guided styling and quantitative evaluation."""

from .clustering import ClusterRegistry, build_registry, embed_pair, kmeans
from .config import Config
from .data import Sample, gen_toy_data, load_dataset, save_sample
from .denoiser import DenoiserNet
from .diffusion import (
    TrainConfig,
    forward_sample,
    predict_mean,
    reverse_step,
    sample,
    train_model,
    train_step,
    tweedie_x0,
)
from .metrics import GaussianStats, eval_report, fid, gaussian_stats, ms_ssim, seg_metrics
from .optim import ParamSet, adamw_step
from .repaint import GenerationConfig, RepaintMask, binarize_and_dilate, inpaint, repaint_plan, repaint_step
from .schedule import NoiseSchedule, RespacedSchedule, make_schedule, respace
from .segmentation import AugPlan, SegNet, augment_dataset, geo_augment, test_seg, train_seg
from .styling import FeatureExtractor, StyleTargets, StyleWeights, guided_reverse_step, stylize, total_loss
from .tensor import Graph, Tensor, finite_diff_check

__version__ = "0.1.0"
