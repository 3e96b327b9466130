"""Two-layer sparse volumetric scene representation.

A dense coarse occupancy grid selects which cells carry an ``s^3`` mini-volume
of feature vectors; queries resolve through a dense lookup table in constant
time. Around it: occupancy-confined ray sampling, an attention-based renderer,
TSDF fusion to meshes and reconstruction metrics.
"""

from .config import ConfigError, SceneConfig
from .features import FeatureMap, aggregate_points, build_dense_volume, meanvar, meanvar_batch, sample_feature
from .fusion import TsdfVolume, integrate, marching_cubes, mesh_edges_manifold, virtual_view
from .geometry import (BoundingBox, Camera, Frame, GridCoord, GridSpec, Ray, convert_frames, load_cameras,
                       ray_aabb, save_cameras, voxel_center)
from .metrics import auc_from_angles, chamfer, evaluate, normal_consistency, sample_surface, vertex_normals
from .occupancy import (Kind, OccupancyField, binarize, dilate, focal_loss, gt_occupancy, neighbor_count,
                        occupancy_metrics)
from .ray_sampling import Fragment, Mode, RaySampleBatch, allocate, sample, sample_ray, traverse
from .renderer import (RendererWeights, RenderOutput, grad_check, loss, loss_gradients, positional_encoding,
                       render_ray, render_rays, sample_point_features)
from .sparse_volume import (MemoryBudgetError, SparseFeatureVolume, build_sparse_volume, densify, load_bundle,
                            memory_report, save_bundle, sparsify)
from .tensorio import (DepthMap, FormatError, TriangleMesh, read_pfm, read_ply, read_tensor, write_pfm,
                       write_ply, write_ppm, write_tensor)

__version__ = "0.1.0"
