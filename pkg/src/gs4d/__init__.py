"""Deformable monocular scene reconstruction with 4D Gaussian clouds.

The package turns an image / depth-prior / mask sequence into a
time-conditioned Gaussian representation: depth backprojection seeds a
canonical cloud, a differentiable software rasterizer with hand-derived
gradients optimizes it under a confidence-guided objective, and a factored
space-time deformation field carries it through time.
"""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataset import Dataset, FrameSample, load_manifest, split_train_val
from .deformation import DeformationField
from .depth import (
    DepthMap,
    backproject,
    depth_gradients,
    normalize_map,
    pseudo_normal_map,
    read_depth_png16,
    read_pfm,
    recover_metric_depth,
    write_depth_png16,
    write_pfm,
)
from .gradcheck import GradcheckReport, build_fixture, run_gradcheck
from .losses import (
    color_loss,
    confidence_loss,
    depth_reg_loss,
    pearson_corr,
    psnr,
    ssim,
    surface_normal_loss,
    total_loss,
)
from .ply import export_ply, import_ply
from .rasterizer import (
    ParamGrads,
    RenderOutput,
    project_gaussians,
    render,
    render_backward,
    render_reference,
    set_num_threads,
)
from .scene import Camera, GaussianCloud, shortest_axis_normal
from .synthetic import generate_synthetic_dataset
from .trainer import (
    Adam,
    TrainConfig,
    Trainer,
    densify_and_prune,
    init_cloud_from_frame,
    load_trainer_state,
    save_trainer_state,
)

__version__ = "0.1.0"
