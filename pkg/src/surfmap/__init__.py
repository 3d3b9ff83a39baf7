"""surfmap: dense image-to-template surface mapping by direct optimization.

Per-image surface-direction fields and scaled-orthographic cameras are fitted
to foreground masks with cycle-consistency, visibility, silhouette and
pose-diversity objectives; fitted maps give dense correspondence and
keypoint-transfer metrics between images.
"""

from surfmap.template import (
    TemplateShape,
    make_icosphere_template,
    load_template,
    save_template,
    uv_to_sphere,
    sphere_to_uv,
    locate,
    phi,
    phi_jacobian,
)
from surfmap.camera import (
    Camera,
    HypothesisSet,
    rotation_matrix,
    project,
    project_jacobians,
    geodesic_distance,
    spread_rotations,
)
from surfmap.maps import SurfaceMap, Mask, DepthMap, SilhouetteMap

__all__ = [
    "TemplateShape",
    "make_icosphere_template",
    "load_template",
    "save_template",
    "uv_to_sphere",
    "sphere_to_uv",
    "locate",
    "phi",
    "phi_jacobian",
    "Camera",
    "HypothesisSet",
    "rotation_matrix",
    "project",
    "project_jacobians",
    "geodesic_distance",
    "spread_rotations",
    "SurfaceMap",
    "Mask",
    "DepthMap",
    "SilhouetteMap",
]

__version__ = "0.1.0"
