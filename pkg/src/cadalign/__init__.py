"""cadalign: 9DoF CAD-to-scan alignment via correspondence heatmaps."""

from .geometry import (OrientedBox, PoseParams, Symmetry, SymmetryTag,
                       decompose, obb_iou, pose_to_matrix, rotation_error,
                       scale_error, se3_exp, se3_log, so3_exp, so3_log,
                       translation_error, trs_to_matrix)
from .grids import (DepthImage, GridKind, TriangleMesh, VoxelGrid,
                    build_pyramid, fuse_depth, mesh_to_df, point_mesh_distance,
                    sample_trilinear, sample_trilinear_batch)
from .keypoints import (ExhaustionError, Keypoint, detect_harris,
                        harris_response, sample_mesh_surface,
                        sample_surface_pairs)
from .correspond import (CorrespondencePair, Heatmap, TrainingSample,
                         combine_heatmaps, filter_correspondences,
                         generate_training_samples, loss_compat, loss_heatmap,
                         loss_scale, loss_total, make_target_heatmap,
                         oracle_correspondences, otsu_threshold,
                         symmetry_orbit, zero_heatmap)
from .solvers import (AlignmentCandidate, AlignmentProblem, CmaesConfig,
                      DegenerateCorrespondences, RansacConfig, SolverConfig,
                      align_multi, cmaes_minimize, cmaes_solve_pairs, lm_solve,
                      ransac_align)
from .benchmark import (EvalConfig, EvalResult, GroundTruthEntry, confidence,
                        evaluate, evaluate_candidates, prune, threshold_sweep)
from .io_scenes import (AlignedModel, Generator, GridFormatError, PlacedModel,
                        ProceduralModel, SceneData, build_mesh, generate_scene,
                        load_alignments, load_grid, load_scene, render_depth,
                        save_alignments, save_grid, save_scene)

__version__ = "0.1.0"
