"""Domain records shared across services: poses, cameras, meshes, renders, banks, samples."""
from dataclasses import dataclass, field
import math
from typing import List, Optional

import numpy as np

from inemo.errors import InvalidArgumentError

TWO_PI = 2.0 * math.pi

# Sentinels for RenderResult index arrays.
OFF_SCREEN = -1
BACKGROUND = -1


@dataclass(frozen=True)
class Pose:
    azimuth: float = 0.0
    elevation: float = 0.0
    roll: float = 0.0
    distance: float = 5.0

    def __post_init__(self):
        values = (self.azimuth, self.elevation, self.roll, self.distance)
        if not all(math.isfinite(v) for v in values):
            raise InvalidArgumentError(f"Pose angles must be finite: {values}")
        if self.distance <= 0:
            raise InvalidArgumentError(f"Pose distance must be positive, got {self.distance}")

    def canonical(self):
        """Wrap azimuth and roll into [0, 2pi), clamp elevation to [-pi/2, pi/2]."""
        return Pose(
            azimuth=float(self.azimuth % TWO_PI),
            elevation=float(min(max(self.elevation, -math.pi / 2), math.pi / 2)),
            roll=float(self.roll % TWO_PI),
            distance=float(self.distance),
        )

    def angles(self):
        return np.array([self.azimuth, self.elevation, self.roll], dtype=np.float64)

    def with_angles(self, angles):
        a = np.asarray(angles, dtype=np.float64)
        return Pose(float(a[0]), float(a[1]), float(a[2]), self.distance)

    def to_dict(self):
        return {
            "azimuth": self.azimuth,
            "elevation": self.elevation,
            "roll": self.roll,
            "distance": self.distance,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            float(data["azimuth"]),
            float(data["elevation"]),
            float(data["roll"]),
            float(data.get("distance", 5.0)),
        )


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. viewport is in pixels per unit of x/z at focal 1."""

    viewport: float
    out_width: int
    out_height: int
    focal: float = 1.0

    def __post_init__(self):
        if self.focal <= 0 or self.viewport <= 0:
            raise InvalidArgumentError("Camera focal and viewport must be positive")
        if self.out_width < 8 or self.out_height < 8:
            raise InvalidArgumentError(
                f"Camera output must be at least 8x8, got {self.out_width}x{self.out_height}"
            )

    @classmethod
    def for_resolution(cls, width, height=None, viewport_scale=2.85, focal=1.0):
        height = width if height is None else height
        return cls(viewport=viewport_scale * width, out_width=int(width), out_height=int(height), focal=focal)

    def scaled(self, stride):
        """Camera for a feature map downsampled by `stride`."""
        if stride < 1 or self.out_width % stride or self.out_height % stride:
            raise InvalidArgumentError(f"Stride {stride} does not divide {self.out_width}x{self.out_height}")
        return Camera(
            viewport=self.viewport / stride,
            out_width=self.out_width // stride,
            out_height=self.out_height // stride,
            focal=self.focal,
        )

    def to_dict(self):
        return {
            "focal": self.focal,
            "viewport": self.viewport,
            "out_width": self.out_width,
            "out_height": self.out_height,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            viewport=float(data["viewport"]),
            out_width=int(data["out_width"]),
            out_height=int(data["out_height"]),
            focal=float(data.get("focal", 1.0)),
        )


@dataclass
class CuboidMesh:
    vertices: np.ndarray  # (K, 3)
    faces: np.ndarray  # (F, 3)
    dims: np.ndarray  # (3,)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidArgumentError("Face index out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise InvalidArgumentError("Degenerate face (repeated vertex index)")

    @property
    def vertex_count(self):
        return len(self.vertices)

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.dims))


@dataclass
class RenderResult:
    pixel_of_vertex: np.ndarray  # (K, 2) int (x, y); OFF_SCREEN rows for off-image vertices
    visible: np.ndarray  # (K,) bool
    vertex_of_pixel: np.ndarray  # (H, W) int; BACKGROUND off the object
    zbuffer: np.ndarray  # (H, W) float; inf off the object
    object_mask: np.ndarray  # (H, W) bool
    face_of_pixel: np.ndarray  # (H, W) int; -1 off the object
    screen_xy: np.ndarray  # (K, 2) continuous projections
    vertex_depth: np.ndarray  # (K,)

    @property
    def shape(self):
        return self.object_mask.shape


@dataclass
class NeuralMesh:
    class_id: int
    geometry: CuboidMesh
    theta: np.ndarray  # (K, d) unit rows
    neighbor_mask: np.ndarray  # (K, K) bool, True where ||v_i - v_k|| < R and i != k

    def __post_init__(self):
        if len(self.theta) != self.geometry.vertex_count:
            raise InvalidArgumentError(
                f"Mesh for class {self.class_id} has {self.geometry.vertex_count} vertices "
                f"but {len(self.theta)} features"
            )

    @property
    def neighborhoods(self):
        return [np.flatnonzero(row) for row in self.neighbor_mask]


@dataclass
class BackgroundBank:
    features: np.ndarray  # (N_bg, d)
    ages: np.ndarray  # (N_bg,) update steps alive

    @property
    def capacity(self):
        return len(self.features)

    @classmethod
    def random(cls, capacity, dim, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((capacity, dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        return cls(features=x, ages=np.zeros(capacity, dtype=np.int64))


@dataclass(frozen=True)
class Exemplar:
    sample_id: str
    class_id: int
    pose: Pose
    bin: int = 0

    def to_dict(self):
        return {"sample_id": self.sample_id, "class_id": self.class_id, "pose": self.pose.to_dict(), "bin": self.bin}

    @classmethod
    def from_dict(cls, data):
        return cls(str(data["sample_id"]), int(data["class_id"]), Pose.from_dict(data["pose"]), int(data["bin"]))


@dataclass
class ClassAppearance:
    class_id: int
    dims: List[float]
    face_colors: List[List[float]]  # 6 faces x RGB
    stripe_freq: List[float]
    stripe_angle: List[float]
    stripe_phase: List[float]

    def key(self):
        return (
            tuple(self.dims),
            tuple(tuple(c) for c in self.face_colors),
            tuple(self.stripe_freq),
            tuple(self.stripe_angle),
            tuple(self.stripe_phase),
        )

    def to_dict(self):
        return {
            "class_id": self.class_id,
            "dims": list(self.dims),
            "face_colors": [list(c) for c in self.face_colors],
            "stripe_freq": list(self.stripe_freq),
            "stripe_angle": list(self.stripe_angle),
            "stripe_phase": list(self.stripe_phase),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            class_id=int(data["class_id"]),
            dims=[float(v) for v in data["dims"]],
            face_colors=[[float(v) for v in c] for c in data["face_colors"]],
            stripe_freq=[float(v) for v in data["stripe_freq"]],
            stripe_angle=[float(v) for v in data["stripe_angle"]],
            stripe_phase=[float(v) for v in data["stripe_phase"]],
        )


@dataclass
class Sample:
    sample_id: str
    class_id: int
    pose: Pose
    image: np.ndarray  # (H, W, 3) in [0, 1]
    object_mask: np.ndarray  # (H, W) bool; visible object pixels
    occlusion_level: Optional[str] = None
    occluded_fraction: float = 0.0
    footprint: Optional[np.ndarray] = field(default=None, repr=False)  # mask before occlusion

    def to_record(self, path=None):
        """Manifest record (no pixels)."""
        return {
            "id": self.sample_id,
            "class_id": self.class_id,
            "pose": self.pose.to_dict(),
            "path": path,
            "occlusion": self.occlusion_level,
            "occluded_fraction": round(float(self.occluded_fraction), 6),
        }
