"""Template mesh, skinning, closest-point queries, local frames, rasterizer."""

from .mesh import (MeshError, TemplateMesh, load_mesh, load_obj, load_ply,
                   make_icosphere, save_mesh, save_obj, save_ply, template_hash)
from .skinning import PoseParams, axis_angle_to_matrix, skin
from .bvh import (AccelStructure, ClosestPoint, accel_of, brute_force_closest,
                  build_bvh, closest_on_triangles, closest_point,
                  closest_points_batch)
from .local import (LocalQuery, face_frame, from_face_frame, local_coords,
                    local_coords_batch, pseudo_normal, to_face_frame)
from .raster import BACKGROUND, Camera, CameraError, RasterResult, rasterize

__all__ = [
    "MeshError", "TemplateMesh", "load_mesh", "load_obj", "load_ply",
    "make_icosphere", "save_mesh", "save_obj", "save_ply", "template_hash",
    "PoseParams", "axis_angle_to_matrix", "skin",
    "AccelStructure", "ClosestPoint", "accel_of", "brute_force_closest",
    "build_bvh", "closest_on_triangles", "closest_point", "closest_points_batch",
    "LocalQuery", "face_frame", "from_face_frame", "local_coords",
    "local_coords_batch", "pseudo_normal", "to_face_frame",
    "BACKGROUND", "Camera", "CameraError", "RasterResult", "rasterize",
]
