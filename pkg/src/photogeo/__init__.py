"""Photo-geometric autoencoding: unsupervised depth, albedo, viewpoint,
and lighting from single images through a differentiable render loop."""

from .autodiff import Tensor, no_grad, tensor
from .camera import (Intrinsics, WarpField, forward_warp_field,
                     intrinsics_from_fov, inverse_warp_field,
                     padded_intrinsics, se3_exp, unproject)
from .gradcheck import GradCheckReport, grad_check
from .losses import (LossWeights, RandomConvEncoder, l1_loss, objective,
                     perceptual_loss, reg_depth_pair, reg_viewpoint)
from .metrics import (MetricReport, keypoint_depth_correlation,
                      normal_angle_error, si_error)
from .networks import (Decomposition, NetConfig, decompose, init_params,
                       squash_range)
from .optim import AdamOptimizer, AdamState, adam_step
from .photometric import (LightState, hflip, light_from_angles,
                          normals_from_depth, shade)
from .pipeline import (TrainConfig, TrainLogRecord, evaluate, render_views,
                       train, train_step)
from .renderer import (PixelMesh, RenderedDepth, bilinear_sample,
                       rasterize_depth, reproject, tessellate)
from .synthdata import (SceneSample, SynthConfig, generate_dataset,
                        generate_scene, load_image_folder, split_dataset)

__version__ = "0.1.0"
