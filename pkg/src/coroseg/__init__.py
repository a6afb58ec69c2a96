"""coroseg: 3D tubular-structure segmentation toolkit.

Pipeline: automatic seed detection, multiscale Hessian vesselness,
blood-intensity modelling, localized level-set segmentation with
bidirectional axial propagation, fast-marching sub-voxel centrelines and
curved planar reformation, validated on synthetic phantoms.
"""

from .blood import (BloodIntensityModel, Histogram, blood_range,
                    build_histogram, detect_aorta, fit_gaussian_lsq,
                    model_from_volume)
from .config import PipelineConfig, parse_config, serialize_config
from .errors import (AortaNotFoundError, BacktrackStagnation, CflError,
                     CorosegError, DataError, FitError, NoSeedError,
                     NumericError, UsageError)
from .levelset import (EvolutionParams, SegmentationResult,
                       adjust_mask_for_branches, conformal_factor,
                       curvature, cv_global_step, geodesic_step,
                       init_sdf_from_mask, localized_step, region_means,
                       reinitialize, segment_tree, slice_propagate,
                       smoothed_delta, smoothed_heaviside)
from .phantoms import GroundTruth, PhantomSpec, apply_ramp, dice, evaluate, generate
from .pipeline import RunReport, run_pipeline
from .seeds import (RayProfile, Roi2D, SeedCandidate, body_region_mask,
                    cast_rays, detect_closed_rois, extract_orthogonal_plane,
                    geometric_feature, select_reference_slice, select_seeds,
                    vessel_direction)
from .skeleton import (ArrivalField, Branch, Centreline, StraightenedVolume,
                       arc_length, backtrack, cpr_straighten, distance_field,
                       extract_centreline, fast_march, load_centreline,
                       rm_frames, save_centreline)
from .vesselness import (EigenTriple, FrangiParams, HessianField,
                         VesselnessField, edge_measure, eigen_symmetric3,
                         frangi_measure, hessian_at_scale,
                         multiscale_vesselness, suppress_edges)
from .volume import (BinaryMask, Image2D, Volume3D, bilinear_sample,
                     connected_components, dilate, erode,
                     extract_axial_slice, gaussian_smooth, load_volume,
                     save_volume, trilinear_sample)

__version__ = "0.1.0"
