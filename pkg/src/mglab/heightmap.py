"""Top-down scene rendering, rotation stacks, and image<->world coordinate maps.

The workspace is rasterized into a 4-channel image (RGB + height in meters)
on a square grid. A rotation stack holds R copies of that image rotated by
multiples of 360/R degrees about the grid center, so a single network scores
R gripper orientations. Rotations at multiples of 90 degrees are exact grid
permutations; other angles use bilinear resampling with zero fill.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import SceneSpec


class FrameError(ValueError):
    """Scene geometry incompatible with the image frame."""


@dataclass(frozen=True)
class FrameConfig:
    """Mapping between grid indices and world coordinates.

    ``origin_world`` is the world (x, y) of the *center* of cell (0, 0).
    Column index j runs along world X (the base motion axis), row index i
    along world Y. The grid must be square so 90-degree rotations are
    lossless permutations.
    """

    cell_size: float = 0.005
    origin_world: tuple[float, float] = (-0.16, -0.16)
    grid_h: int = 64
    grid_w: int = 64
    motion_axis: tuple[float, float] = (1.0, 0.0)

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.grid_h != self.grid_w:
            raise FrameError("square grid required for lossless 90-degree rotations")
        if tuple(self.motion_axis) != (1.0, 0.0):
            raise ValueError("motion axis is fixed to world +X")

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """World bounding box (x_min, x_max, y_min, y_max) covered by cells."""
        ox, oy = self.origin_world
        h = self.cell_size / 2.0
        return (
            ox - h,
            ox + (self.grid_w - 1) * self.cell_size + h,
            oy - h,
            oy + (self.grid_h - 1) * self.cell_size + h,
        )


@dataclass
class Heightmap:
    """Rendered scene image: color in [0,1], height in meters (0 = floor)."""

    color: np.ndarray  # (H, W, 3) float32
    height: np.ndarray  # (H, W) float32

    def channels(self) -> np.ndarray:
        """Stack into the 4-channel (H, W, 4) network input image."""
        return np.concatenate([self.color, self.height[..., None]], axis=2)


@dataclass
class RotationStack:
    """R rotated copies of the 4-channel image; copy k is rotated by k*360/R deg."""

    rotations: int
    maps: np.ndarray  # (R, H, W, 4) float32

    @property
    def angles_deg(self) -> np.ndarray:
        return np.arange(self.rotations) * (360.0 / self.rotations)


def render_heightmap(scene: SceneSpec, frame: FrameConfig) -> Heightmap:
    """Rasterize a scene into a color+height image.

    Each cell reports the max part height covering its center and the color
    of the topmost covering part (ties go to the later part in scene order).
    Cells covered by nothing get height 0 and the workspace color.

    Raises :class:`FrameError` if any object extends outside the frame.
    """
    h, w = frame.grid_h, frame.grid_w
    color = np.empty((h, w, 3), dtype=np.float32)
    color[:] = np.asarray(scene.workspace_color, dtype=np.float32)
    height = np.zeros((h, w), dtype=np.float32)

    ox, oy = frame.origin_world
    xs = ox + np.arange(w) * frame.cell_size  # cell-center world x per column
    ys = oy + np.arange(h) * frame.cell_size  # cell-center world y per row
    x_min, x_max, y_min, y_max = frame.extent

    for obj in scene.objects:
        for part in obj.parts:
            for cx, cy in part.corners():
                if not (x_min <= cx <= x_max and y_min <= cy <= y_max):
                    raise FrameError(
                        f"object part at ({part.center[0]:.3f}, {part.center[1]:.3f}) "
                        "extends outside the frame"
                    )
            mask = _cells_covered(part, xs, ys)
            paint = mask & (part.height >= height)
            color[paint] = np.asarray(part.color, dtype=np.float32)
            np.maximum(height, np.where(mask, np.float32(part.height), 0.0), out=height)

    return Heightmap(color=color, height=height)


def _cells_covered(part, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Boolean (H, W) mask of cells whose center lies inside the rectangle."""
    cx, cy = part.center
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    c, s = np.cos(part.yaw), np.sin(part.yaw)
    u = c * dx + s * dy  # along the w axis
    t = -s * dx + c * dy  # along the l axis
    return (np.abs(u) <= part.size[0] / 2.0) & (np.abs(t) <= part.size[1] / 2.0)


def rotation_matrix(rot_k: int, rotations: int) -> np.ndarray:
    """Index-space rotation matrix for copy ``rot_k`` of an R-way stack.

    Composed as an exact integer 90-degree power times a small-angle rotation
    so that M[k + R/4] equals Rot90 @ M[k] bit-exactly (whenever 4 | R). This
    makes 90-degree input rotations commute exactly with stack construction.
    """
    if not 0 <= rot_k < rotations:
        raise ValueError(f"rotation index {rot_k} out of range for R={rotations}")
    rot90 = np.array([[0.0, -1.0], [1.0, 0.0]])
    if rotations % 4 == 0:
        quarter = rotations // 4
        q, r = divmod(rot_k, quarter)
    else:
        q, r = 0, rot_k
    ang = 2.0 * np.pi * r / rotations
    m = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    return np.linalg.matrix_power(rot90, q) @ m


def _rotate_image(img: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Rotate (H, W, C) image about the grid center by the index-space matrix.

    Inverse-map bilinear sampling with zero fill. Integer sampling positions
    (identity, 90-degree multiples) reproduce the input values exactly.
    """
    n = img.shape[0]
    c = (n - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    # source = M^T (dest - c) + c ; M^T is the inverse rotation
    di, dj = ii - c, jj - c
    si = mat[0, 0] * di + mat[1, 0] * dj + c
    sj = mat[0, 1] * di + mat[1, 1] * dj + c

    i0 = np.floor(si).astype(np.int64)
    j0 = np.floor(sj).astype(np.int64)
    fi = si - i0
    fj = sj - j0

    out = np.zeros((n, n, img.shape[2]), dtype=np.float64)
    for oi, oj, wgt in (
        (i0, j0, (1 - fi) * (1 - fj)),
        (i0, j0 + 1, (1 - fi) * fj),
        (i0 + 1, j0, fi * (1 - fj)),
        (i0 + 1, j0 + 1, fi * fj),
    ):
        inside = (oi >= 0) & (oi < n) & (oj >= 0) & (oj < n)
        w_in = np.where(inside, wgt, 0.0)
        vals = img[np.clip(oi, 0, n - 1), np.clip(oj, 0, n - 1)]
        out += w_in[..., None] * vals
    return out.astype(img.dtype)


def build_rotation_stack(hm: Heightmap, rotations: int) -> RotationStack:
    """Build the R-way rotation stack from a rendered heightmap.

    Each copy is composed as an exact 90-degree grid permutation followed by
    a bilinear rotation through the residual angle. Rotating the *input* by
    90 degrees therefore only shifts which permutation feeds the identical
    bilinear call, so the rotation channels permute with bit-exact equality
    (the wiring-equivariance property downstream tests rely on).
    """
    if rotations < 1:
        raise ValueError("rotation count must be >= 1")
    img = hm.channels()
    if img.shape[0] != img.shape[1]:
        raise FrameError("rotation stack requires a square grid")
    quarter = rotations // 4 if rotations % 4 == 0 else rotations
    maps = np.empty((rotations,) + img.shape, dtype=np.float32)
    for k in range(rotations):
        q4, rem = divmod(k, quarter)
        base = np.rot90(img, q4)
        if rem == 0:
            maps[k] = base
        else:
            maps[k] = _rotate_image(base, rotation_matrix(rem, rotations))
    return RotationStack(rotations=rotations, maps=maps)


def unrotate_index(i: float, j: float, rot_k: int, rotations: int, grid_n: int) -> tuple[float, float]:
    """Map a pixel of rotated copy ``rot_k`` back to copy-0 (fractional) indices."""
    c = (grid_n - 1) / 2.0
    mat = rotation_matrix(rot_k, rotations)
    di, dj = i - c, j - c
    return (mat[0, 0] * di + mat[1, 0] * dj + c, mat[0, 1] * di + mat[1, 1] * dj + c)


def pixel_to_world(i: int, j: int, rot_k: int, rotations: int, frame: FrameConfig) -> tuple[float, float]:
    """World (x, y) of pixel (i, j) in rotation copy ``rot_k``.

    The pixel is first un-rotated into copy-0 indices, then mapped through
    the affine cell->world transform. x runs along the motion axis.
    """
    if not (0 <= i < frame.grid_h and 0 <= j < frame.grid_w):
        raise IndexError(f"pixel ({i}, {j}) outside {frame.grid_h}x{frame.grid_w} grid")
    pi, pj = unrotate_index(float(i), float(j), rot_k, rotations, frame.grid_h)
    ox, oy = frame.origin_world
    return (ox + pj * frame.cell_size, oy + pi * frame.cell_size)


def world_to_pixel(x: float, y: float, frame: FrameConfig) -> tuple[int, int]:
    """Nearest copy-0 pixel (i, j) for a world point; inverse of rot-0 pixel_to_world."""
    ox, oy = frame.origin_world
    j = int(round((x - ox) / frame.cell_size))
    i = int(round((y - oy) / frame.cell_size))
    if not (0 <= i < frame.grid_h and 0 <= j < frame.grid_w):
        raise IndexError(f"world point ({x:.3f}, {y:.3f}) outside the frame")
    return i, j


def save_height_png(hm: Heightmap, path) -> None:
    """Write the height channel as a 16-bit grayscale PNG (1 unit = 1 mm)."""
    from PIL import Image

    mm = np.round(hm.height * 1000.0).astype(np.uint16)
    Image.fromarray(mm).save(path)


def save_color_png(hm: Heightmap, path) -> None:
    """Write the color channels as an 8-bit RGB PNG."""
    from PIL import Image

    rgb = np.clip(np.round(hm.color * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path)
