"""Mosaic assembly, dataset files, and the synthetic scene generator.

Coordinate conventions
----------------------
Ground-truth files store boxes in a y-up BEV frame: the ego vehicle sits at
(0.5, 0.5) and +y points toward the vehicle front, which maps to the top of a
rendered image. The model and renderer work in the y-down raster frame;
``box_file_to_raster`` converts (y' = 1 - y, theta' = -theta). The two frames
agree on x.

Mosaic layout (tile grid row, col):
  (0,0) front_left   (0,1) front   (0,2) front_right
  (1,0) left         (1,1) blank   (1,2) right
  (2,0) rear_left    (2,1) rear    (2,2) rear_right
Row-2 tiles are rotated 180 degrees before placement; the center is zeros.

Synthetic scenes
----------------
Each vehicle is assigned to one of eight 45-degree bearing sectors (bearing
measured clockwise from straight ahead; a bearing exactly on a sector boundary
goes to the lower sector index). Into that sector's camera tile we paint one
anti-aliased rectangle marker whose placement is a fixed continuous function
of the vehicle state, so a small BEV perturbation moves pixels a small amount:

  u (px, across)   = tile_size * (0.5 + 1.5 * cross_range)
  v (px, down)     = tile_size * (7.5 / 64) / max(range, 0.15)
  size             = tile_size * (2.0 / 64) / max(range, 0.12), aspect 1.6:1
  marker rotation  = camera boresight azimuth - vehicle heading
  color            = (255, range code, bearing-offset code)

where cross_range = range * sin(bearing offset from the sector axis). Nearer
vehicles paint later (occlusion order). Markers are clipped to their tile;
every vehicle keeps at least one painted pixel there.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError, ValidationError
from .geometry import OrientedBox, normalize_angle, to_aabb

DEFAULT_TILE_SIZE = 64
CANONICAL_SIZE = (0.10, 0.045)  # every synthetic vehicle has this (width, height)
MAX_VEHICLES_PER_FRAME = 8
EGO_RADIUS = 0.06  # no vehicle centers inside this disk around the ego
MIN_SEPARATION = 0.11  # pairwise center distance between sampled vehicles
BACKGROUND = 28  # gray level of unpainted tile pixels

# Placement constants (pixels at tile_size 64, scaled linearly with tile_size).
CROSS_GAIN = 1.5
V_NUMERATOR = 7.5
V_RANGE_FLOOR = 0.15
SIZE_NUMERATOR = 2.0
SIZE_RANGE_FLOOR = 0.12
MARKER_ASPECT = 1.6
RANGE_CODE_FULL = 0.65  # range that maps to the bottom of the green code band

CAMERA_NAMES = (
    "front_left", "front", "front_right",
    "left", "right",
    "rear_left", "rear", "rear_right",
)

# camera -> (grid_row, grid_col, rotated)
CAMERA_LAYOUT = {
    "front_left": (0, 0, False),
    "front": (0, 1, False),
    "front_right": (0, 2, False),
    "left": (1, 0, False),
    "right": (1, 2, False),
    "rear_left": (2, 0, True),
    "rear": (2, 1, True),
    "rear_right": (2, 2, True),
}

# Sector index k covers bearings ((k-0.5)*45, (k+0.5)*45] degrees clockwise
# from straight ahead.
SECTOR_CAMERAS = (
    "front", "front_right", "right", "rear_right",
    "rear", "rear_left", "left", "front_left",
)


@dataclass(frozen=True)
class MosaicFrame:
    """Assembled 3x3 mosaic and the placement of each camera tile."""

    image: np.ndarray  # (3*tile_size, 3*tile_size, 3) uint8
    tile_map: tuple[tuple[str, int, int, bool], ...]

    @property
    def tile_size(self) -> int:
        return self.image.shape[0] // 3


@dataclass(frozen=True)
class GroundTruthFrame:
    """Per-frame ground truth: vehicles in the y-up BEV file frame."""

    frame_id: str
    vehicles: tuple[OrientedBox, ...]


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic recipe for one synthetic frame."""

    seed: int
    n_vehicles: int
    tile_size: int = DEFAULT_TILE_SIZE

    def __post_init__(self):
        if not 0 <= self.n_vehicles <= MAX_VEHICLES_PER_FRAME:
            raise ValidationError(
                f"n_vehicles {self.n_vehicles} outside [0, {MAX_VEHICLES_PER_FRAME}]"
            )
        if self.tile_size < 16:
            raise ValidationError(f"tile_size {self.tile_size} too small (min 16)")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


def box_file_to_raster(b: OrientedBox) -> OrientedBox:
    """Convert a box from the y-up file frame to the y-down raster frame."""
    return OrientedBox(b.cx, 1.0 - b.cy, b.width, b.height,
                       normalize_angle(-b.theta))


def gt_raster(gt: GroundTruthFrame) -> list[OrientedBox]:
    """All ground-truth boxes of a frame converted to the raster frame."""
    return [box_file_to_raster(b) for b in gt.vehicles]


# -- basic image ops ---------------------------------------------------------


def rotate180(img: np.ndarray) -> np.ndarray:
    """Rotate an image by 180 degrees: pixel (r, c) -> (H-1-r, W-1-c)."""
    return np.ascontiguousarray(img[::-1, ::-1])


def assemble_mosaic(tiles: dict[str, np.ndarray]) -> MosaicFrame:
    """Place 8 equal square camera tiles on the 3x3 grid (center left blank)."""
    if set(tiles) != set(CAMERA_NAMES):
        raise ValidationError(
            f"expected cameras {sorted(CAMERA_NAMES)}, got {sorted(tiles)}"
        )
    sizes = {t.shape for t in tiles.values()}
    if len(sizes) != 1:
        raise ValidationError(f"tiles must share one shape, got {sorted(sizes)}")
    shape = sizes.pop()
    if len(shape) != 3 or shape[0] != shape[1] or shape[2] != 3:
        raise ValidationError(f"tiles must be square HxWx3, got {shape}")
    t = shape[0]
    image = np.zeros((3 * t, 3 * t, 3), dtype=np.uint8)
    tile_map = []
    for name in CAMERA_NAMES:
        row, col, rotated = CAMERA_LAYOUT[name]
        tile = np.asarray(tiles[name], dtype=np.uint8)
        if rotated:
            tile = rotate180(tile)
        image[row * t:(row + 1) * t, col * t:(col + 1) * t] = tile
        tile_map.append((name, row, col, rotated))
    return MosaicFrame(image=image, tile_map=tuple(tile_map))


def extract_tile(frame: MosaicFrame, camera_id: str) -> np.ndarray:
    """Recover a camera tile from the mosaic, undoing the row-2 rotation."""
    if camera_id not in CAMERA_LAYOUT:
        raise ValidationError(f"unknown camera {camera_id!r}")
    row, col, rotated = CAMERA_LAYOUT[camera_id]
    t = frame.tile_size
    tile = frame.image[row * t:(row + 1) * t, col * t:(col + 1) * t]
    return rotate180(tile) if rotated else np.ascontiguousarray(tile)


# -- synthetic scene painter --------------------------------------------------


def bearing_sector(beta: float) -> int:
    """Sector index for a bearing in (-pi, pi]; exact boundaries go to the lower index."""
    t = (beta + math.pi / 8.0) / (math.pi / 4.0)
    f = math.floor(t)
    if t == f:
        k = f % 8
        return k if k == 0 else k - 1
    return f % 8


@dataclass(frozen=True)
class MarkerPlacement:
    """Where and how a vehicle's marker is painted inside its sector tile."""

    sector: int
    camera_id: str
    u: float  # marker center, pixels from tile left
    v: float  # marker center, pixels from tile top
    long_px: float
    short_px: float
    phi: float  # marker long-axis angle in tile coords (u right, v down)
    color: tuple[int, int, int]
    rng: float  # range from ego, BEV units
    bearing: float


def marker_placement(box: OrientedBox, tile_size: int) -> MarkerPlacement:
    """The documented placement function: vehicle state -> in-tile marker."""
    dx = box.cx - 0.5
    dy = box.cy - 0.5  # file frame: +y is forward
    rng = math.hypot(dx, dy)
    beta = math.atan2(dx, dy)  # 0 = ahead, positive = clockwise (rightward)
    k = bearing_sector(beta)
    delta = normalize_angle(beta - k * (math.pi / 4.0))
    cross = rng * math.sin(delta)
    px = tile_size / 64.0
    u = tile_size * (0.5 + CROSS_GAIN * cross)
    v = px * V_NUMERATOR / max(rng, V_RANGE_FLOOR)
    size = px * SIZE_NUMERATOR / max(rng, SIZE_RANGE_FLOOR)
    boresight = math.pi / 2.0 - k * (math.pi / 4.0)  # camera axis, CCW from +x
    phi = normalize_angle(boresight - box.theta)
    g = int(np.clip(round(40 + 200 * (1.0 - min(rng, RANGE_CODE_FULL) / RANGE_CODE_FULL)), 40, 240))
    b = int(np.clip(round(127.5 + 112.0 * (delta / (math.pi / 8.0))), 15, 240))
    return MarkerPlacement(
        sector=k, camera_id=SECTOR_CAMERAS[k], u=u, v=v,
        long_px=MARKER_ASPECT * size, short_px=size, phi=phi,
        color=(255, g, b), rng=rng, bearing=beta,
    )


def paint_vehicle(tiles: dict[str, np.ndarray], box: OrientedBox) -> MarkerPlacement:
    """Paint one vehicle's marker into its sector tile (in place)."""
    tile_size = tiles[SECTOR_CAMERAS[0]].shape[0]
    p = marker_placement(box, tile_size)
    tile = tiles[p.camera_id]
    a, b = p.long_px / 2.0, p.short_px / 2.0
    rad = math.hypot(a, b)
    c0 = max(0, math.floor(p.u - rad))
    c1 = min(tile_size - 1, math.ceil(p.u + rad))
    r0 = max(0, math.floor(p.v - rad))
    r1 = min(tile_size - 1, math.ceil(p.v + rad))
    if c1 < c0 or r1 < r0:
        return p
    # 4x4 supersampled coverage of the rotated rectangle per pixel.
    sub = (np.arange(4) + 0.5) / 4.0
    cols = np.arange(c0, c1 + 1)
    rows = np.arange(r0, r1 + 1)
    xs = (cols[:, None] + sub[None, :]).ravel()  # (n_cols*4,)
    ys = (rows[:, None] + sub[None, :]).ravel()
    gx, gy = np.meshgrid(xs, ys)  # (rows*4, cols*4)
    dxp, dyp = gx - p.u, gy - p.v
    cphi, sphi = math.cos(p.phi), math.sin(p.phi)
    lu = dxp * cphi + dyp * sphi
    lv = -dxp * sphi + dyp * cphi
    inside = (np.abs(lu) <= a) & (np.abs(lv) <= b)
    cov = inside.reshape(len(rows), 4, len(cols), 4).mean(axis=(1, 3))
    patch = tile[r0:r1 + 1, c0:c1 + 1].astype(np.float64)
    color = np.array(p.color, dtype=np.float64)
    blended = patch * (1.0 - cov[..., None]) + color * cov[..., None]
    tile[r0:r1 + 1, c0:c1 + 1] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    return p


def background_tiles(tile_size: int) -> dict[str, np.ndarray]:
    """Fresh gray tiles for all eight cameras."""
    return {
        name: np.full((tile_size, tile_size, 3), BACKGROUND, dtype=np.uint8)
        for name in CAMERA_NAMES
    }


def synth_scene(spec: SceneSpec) -> tuple[MosaicFrame, GroundTruthFrame]:
    """Generate one deterministic synthetic frame and its ground truth."""
    rng = np.random.default_rng(spec.seed)
    margin = math.hypot(*CANONICAL_SIZE) / 2.0 + 1e-3  # keep corners inside [0,1]^2
    centers: list[tuple[float, float]] = []
    boxes: list[OrientedBox] = []
    for _ in range(spec.n_vehicles):
        for _attempt in range(1000):
            cx = rng.uniform(margin, 1.0 - margin)
            cy = rng.uniform(margin, 1.0 - margin)
            r = math.hypot(cx - 0.5, cy - 0.5)
            if r <= EGO_RADIUS:
                continue
            if any(math.hypot(cx - ox, cy - oy) < MIN_SEPARATION for ox, oy in centers):
                continue
            break
        else:
            raise ValidationError(
                f"could not place vehicle {len(boxes)} after 1000 attempts"
            )
        theta = normalize_angle(rng.uniform(-math.pi, math.pi))
        centers.append((cx, cy))
        boxes.append(OrientedBox(cx, cy, CANONICAL_SIZE[0], CANONICAL_SIZE[1], theta))

    tiles = background_tiles(spec.tile_size)
    order = sorted(range(len(boxes)),
                   key=lambda i: (-math.hypot(boxes[i].cx - 0.5, boxes[i].cy - 0.5), i))
    for i in order:
        paint_vehicle(tiles, boxes[i])
    frame = assemble_mosaic(tiles)
    gt = GroundTruthFrame(frame_id=f"{spec.seed:08d}", vehicles=tuple(boxes))
    return frame, gt


# -- PPM (P6) ------------------------------------------------------------------


_PPM_HEADER = re.compile(rb"^P6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def write_ppm(path, img: np.ndarray) -> None:
    """Write an HxWx3 uint8 image as binary PPM."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValidationError(f"PPM wants HxWx3 uint8, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM written by write_ppm; errors carry path and byte offset."""
    data = Path(path).read_bytes()
    m = _PPM_HEADER.match(data)
    if not m:
        raise DatasetFormatError(f"{path}: not a binary PPM header (offset 0)")
    w, h, maxval = (int(m.group(i)) for i in (1, 2, 3))
    if maxval != 255:
        raise DatasetFormatError(f"{path}: unsupported maxval {maxval} (offset {m.start(3)})")
    start = m.end()
    need = w * h * 3
    if len(data) - start != need:
        raise DatasetFormatError(
            f"{path}: payload is {len(data) - start} bytes, expected {need} (offset {start})"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=start).reshape(h, w, 3).copy()


# -- dataset directory ----------------------------------------------------------


DATASET_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    """A loaded dataset: manifest fields plus frames sorted by frame_id."""

    tile_size: int
    seed_range: tuple[int, int]
    frames: tuple[tuple[str, np.ndarray, GroundTruthFrame], ...]  # (id, image, gt)

    def __len__(self):
        return len(self.frames)


def write_dataset(frames: list[tuple[MosaicFrame, GroundTruthFrame]], out_dir,
                  tile_size: int, seed_range: tuple[int, int]) -> None:
    """Write manifest.json, frames/<id>.ppm, labels/<id>.json."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    ids = [gt.frame_id for _, gt in frames]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate frame_id in dataset")
    for mosaic, gt in frames:
        write_ppm(out / "frames" / f"{gt.frame_id}.ppm", mosaic.image)
        label = {
            "frame_id": gt.frame_id,
            "vehicles": [[b.cx, b.cy, b.width, b.height, b.theta] for b in gt.vehicles],
        }
        (out / "labels" / f"{gt.frame_id}.json").write_text(
            json.dumps(label, indent=1) + "\n"
        )
    manifest = {
        "version": DATASET_VERSION,
        "frame_count": len(frames),
        "tile_size": tile_size,
        "seed_range": list(seed_range),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(
            f"{path}: invalid JSON at line {e.lineno} column {e.colno}"
        ) from e


def _parse_label(path) -> GroundTruthFrame:
    obj = _load_json(path)
    if not isinstance(obj, dict) or set(obj) != {"frame_id", "vehicles"}:
        raise DatasetFormatError(f"{path}: label must have frame_id and vehicles")
    if not isinstance(obj["frame_id"], str):
        raise DatasetFormatError(f"{path}: frame_id must be a string")
    vehicles = []
    for i, row in enumerate(obj["vehicles"]):
        if not (isinstance(row, list) and len(row) == 5
                and all(isinstance(x, (int, float)) for x in row)):
            raise DatasetFormatError(
                f"{path}: vehicle {i} must be [cx, cy, width, height, theta]"
            )
        try:
            box = OrientedBox(*map(float, row))
        except ValidationError as e:
            raise DatasetFormatError(f"{path}: vehicle {i}: {e}") from e
        ab = to_aabb(box)
        if ab.xmin < 0.0 or ab.ymin < 0.0 or ab.xmax > 1.0 or ab.ymax > 1.0:
            raise DatasetFormatError(f"{path}: vehicle {i} extends outside [0,1]^2")
        vehicles.append(box)
    return GroundTruthFrame(frame_id=obj["frame_id"], vehicles=tuple(vehicles))


def load_dataset(root) -> Dataset:
    """Load and fully validate a dataset directory; fails on the first violation."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetFormatError(f"{manifest_path}: missing manifest")
    manifest = _load_json(manifest_path)
    required = {"version", "frame_count", "tile_size", "seed_range"}
    if not isinstance(manifest, dict) or not required.issubset(manifest):
        raise DatasetFormatError(f"{manifest_path}: missing fields {sorted(required)}")
    if manifest["version"] != DATASET_VERSION:
        raise DatasetFormatError(
            f"{manifest_path}: version {manifest['version']} != {DATASET_VERSION}"
        )
    tile_size = int(manifest["tile_size"])
    count = int(manifest["frame_count"])
    ppms = sorted((root / "frames").glob("*.ppm"))
    labels = sorted((root / "labels").glob("*.json"))
    if len(ppms) != count or len(labels) != count:
        raise DatasetFormatError(
            f"{manifest_path}: frame_count {count} but found "
            f"{len(ppms)} frames and {len(labels)} labels"
        )
    ids = [p.stem for p in ppms]
    if ids != [p.stem for p in labels]:
        raise DatasetFormatError(f"{root}: frame and label ids do not match")
    frames = []
    side = 3 * tile_size
    for frame_id, ppm_path, label_path in zip(ids, ppms, labels):
        img = read_ppm(ppm_path)
        if img.shape != (side, side, 3):
            raise DatasetFormatError(
                f"{ppm_path}: image is {img.shape}, expected {(side, side, 3)}"
            )
        center = img[tile_size:2 * tile_size, tile_size:2 * tile_size]
        if center.any():
            raise DatasetFormatError(f"{ppm_path}: mosaic center cell is not blank")
        gt = _parse_label(label_path)
        if gt.frame_id != frame_id:
            raise DatasetFormatError(
                f"{label_path}: frame_id {gt.frame_id!r} != file id {frame_id!r}"
            )
        frames.append((frame_id, img, gt))
    seed_range = tuple(int(s) for s in manifest["seed_range"])
    if len(seed_range) != 2:
        raise DatasetFormatError(f"{manifest_path}: seed_range must have two entries")
    return Dataset(tile_size=tile_size, seed_range=seed_range, frames=tuple(frames))


def generate_dataset(n_frames: int, seed: int, out_dir, tile_size: int = DEFAULT_TILE_SIZE,
                     min_vehicles: int = 1, max_vehicles: int = 4) -> None:
    """Generate n_frames synthetic frames with per-frame seeds seed..seed+n-1."""
    if n_frames <= 0:
        raise ValidationError("n_frames must be positive")
    if not 0 <= min_vehicles <= max_vehicles <= MAX_VEHICLES_PER_FRAME:
        raise ValidationError(
            f"need 0 <= min_vehicles <= max_vehicles <= {MAX_VEHICLES_PER_FRAME}"
        )
    frames = []
    for i in range(n_frames):
        frame_seed = seed + i
        n = int(np.random.default_rng([frame_seed, 7]).integers(min_vehicles,
                                                                max_vehicles + 1))
        frames.append(synth_scene(SceneSpec(seed=frame_seed, n_vehicles=n,
                                            tile_size=tile_size)))
    write_dataset(frames, out_dir, tile_size=tile_size,
                  seed_range=(seed, seed + n_frames - 1))


def image_to_input(img: np.ndarray) -> np.ndarray:
    """Convert an HxWx3 uint8 mosaic into a (3, H, W) float64 array in [0,1]."""
    return np.ascontiguousarray(img.astype(np.float64).transpose(2, 0, 1) / 255.0)
