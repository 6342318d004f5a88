"""skelpose: a differentiable skeleton pose toolkit.

Rotation-matrix regression targets with Gram-Schmidt orthogonalization,
a global-rotation codebook, forward kinematics by linear integration,
cross heatmaps with spatial soft-argmax, the composite training loss
and evaluation metrics, linear blend skinning, and a 2D-to-3D lifting
pipeline with human review.
"""

from . import (assembly, codebook, diffgraph, heatmaps, lifting, objectives,
               review, rotations, skeleton, skinning)
from .assembly import FinalPose, InitialPose, initial_pose, minimal_rotation, refine_rotations
from .codebook import RotationCodebook, blend, build_codebook, classify
from .heatmaps import (CrossHeatmap, VolumeBounds, decode_cross, encode_cross,
                       project_to_plane, render_gaussian, soft_argmax2d)
from .lifting import (LiftResult, PCABasis, WeakPerspectiveCamera, annotate_batch,
                      build_pca_basis, fit_skeleton, pmp_lift)
from .objectives import (LossComponents, LossWeights, SupervisionMask, loss_hm,
                         loss_pos, loss_rot_mse, loss_rotg, mpjpe,
                         reconstruction_error, rotation_errors, total_loss)
from .rotations import (AxisAngle, from_axis_angle, geodesic_deg, gram_schmidt,
                        gram_schmidt_backward, is_rotation, random_rotation,
                        to_axis_angle)
from .skeleton import (Pose, Skeleton, bone_vectors, fk_backward,
                       forward_kinematics, normalize_lengths)
from .skinning import SkinnedMesh, auto_weights, export_obj, skin

__version__ = "0.1.0"
