"""Topological map: pose-anchored nodes bundling a depth image, an intensity
image, and the global camera pose, indexed by a kd-tree over node positions.

On-disk bundle layout (one directory per map):
  * ``manifest.json``: version, build intrinsics, node table (TUM-order quaternions)
  * ``depth_<id>.tdm``: magic ``TDM1``, LE uint32 width/height, float32 rows (top first)
  * ``image_<id>.pgm``: binary P5 intensity image
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    ChecksumMismatch,
    DimensionMismatch,
    EmptyMap,
    FormatVersionMismatch,
    InputError,
    NoDepth,
    OutOfBounds,
)
from .geometry import CameraIntrinsics, Pose, Rotation, unproject

log = logging.getLogger(__name__)

TDM_MAGIC = b"TDM1"
MANIFEST_VERSION = 1
# Depths at or beyond this range are treated as invalid when rendering.
DEFAULT_MAX_RANGE_M = 200.0


@dataclass
class DepthImage:
    """Row-major float32 depth in meters; values <= 0 or non-finite mean no depth."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DimensionMismatch("depth buffer must be 2-D (height, width)")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.data) & (self.data > 0.0)


@dataclass
class IntensityImage:
    """Row-major uint8 intensity buffer."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 2:
            raise DimensionMismatch("intensity buffer must be 2-D (height, width)")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass
class TopoNode:
    """One map node: what the camera saw at ``pose`` (camera-in-global)."""

    node_id: int
    depth: DepthImage
    image: IntensityImage
    pose: Pose
    timestamp: float
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        if self.depth.data.size == 0:
            raise DimensionMismatch("node depth image is empty")
        if self.depth.data.shape != self.image.data.shape:
            raise DimensionMismatch(
                f"depth {self.depth.data.shape} and image {self.image.data.shape} differ"
            )
        if (self.depth.height, self.depth.width) != (self.intrinsics.height, self.intrinsics.width):
            raise DimensionMismatch("image dimensions differ from intrinsics")


class TopologicalMap:
    """Ordered node collection with exact nearest-neighbor retrieval.

    Building is single-writer; after construction (or load) the map is meant
    to be immutable and is safe for concurrent reads once ``build_index`` has
    run (the loaders and map builders call it).
    """

    def __init__(self, intrinsics: CameraIntrinsics):
        self.intrinsics = intrinsics
        self.nodes: list[TopoNode] = []
        self._tree: cKDTree | None = None
        self._stamps: set[float] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def insert_node(self, node: TopoNode) -> int:
        """Append a node; its id is rewritten to keep ids dense and ordered."""
        key = round(node.timestamp, 9)
        if key in self._stamps:
            log.warning("duplicate node timestamp %.6f", node.timestamp)
        self._stamps.add(key)
        node.node_id = len(self.nodes)
        self.nodes.append(node)
        self._tree = None  # rebuilt on the next query or build_index call
        return node.node_id

    def node(self, node_id: int) -> TopoNode:
        return self.nodes[node_id]

    def positions(self) -> np.ndarray:
        return np.array([n.pose.translation for n in self.nodes]).reshape(-1, 3)

    def build_index(self) -> None:
        """Materialize the spatial index so later queries are read-only."""
        if self.nodes and self._tree is None:
            self._tree = cKDTree(self.positions())

    def nearest_node(self, position: np.ndarray) -> TopoNode:
        """Node minimizing Euclidean distance to ``position``; ties -> lower id."""
        if not self.nodes:
            raise EmptyMap("nearest_node on an empty map")
        position = np.asarray(position, dtype=float).reshape(3)
        if self._tree is None:
            self._tree = cKDTree(self.positions())
        dist, idx = self._tree.query(position)
        # Exact tie-break on the lowest node id: collect everything at the
        # minimum distance (the kd-tree alone does not promise an order).
        ties = self._tree.query_ball_point(position, dist * (1.0 + 1e-12) + 1e-12)
        best = min(ties) if ties else int(idx)
        return self.nodes[best]


def depth_to_point(node: TopoNode, f: np.ndarray) -> np.ndarray:
    """Lift pixel ``f`` to the node camera frame via nearest-pixel depth lookup.

    Nearest-pixel (not bilinear): interpolating across depth discontinuities
    would invent points on no surface.
    """
    u, v = np.asarray(f, dtype=float)
    col, row = int(round(u)), int(round(v))
    if not (0 <= col < node.depth.width and 0 <= row < node.depth.height):
        raise OutOfBounds(f"pixel ({u:.2f}, {v:.2f}) outside {node.depth.width}x{node.depth.height}")
    d = float(node.depth.data[row, col])
    if not np.isfinite(d) or d <= 0.0:
        raise NoDepth(f"no depth stored at pixel ({col}, {row})")
    return unproject(node.intrinsics, f, d)


def map_point_global(node: TopoNode, f: np.ndarray) -> np.ndarray:
    """Lift pixel ``f`` to a global 3-D map point using the node pose."""
    return node.pose.apply(depth_to_point(node, f))


# ---------------------------------------------------------------------------
# bundle save/load

def write_tdm(path, depth: DepthImage) -> None:
    with Path(path).open("wb") as fh:
        fh.write(TDM_MAGIC)
        fh.write(struct.pack("<II", depth.width, depth.height))
        fh.write(depth.data.astype("<f4").tobytes())


def read_tdm(path) -> DepthImage:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != TDM_MAGIC:
        raise FormatVersionMismatch(f"{path}: bad or missing TDM1 magic")
    w, h = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * w * h
    if len(raw) != expected:
        raise ChecksumMismatch(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw[12:], dtype="<f4").reshape(h, w)
    return DepthImage(data.copy())


def write_pgm(path, image: IntensityImage) -> None:
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(image.data.tobytes())


def read_pgm(path) -> IntensityImage:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(b"P5"):
        raise FormatVersionMismatch(f"{path}: not a binary PGM (P5) file")
    # Header: P5, whitespace-separated width/height/maxval, single whitespace, pixels.
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ChecksumMismatch(f"{path}: truncated PGM header")
        fields.append(int(raw[start:pos]))
    pos += 1  # the single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatVersionMismatch(f"{path}: only 8-bit PGM supported")
    if len(raw) - pos != w * h:
        raise ChecksumMismatch(f"{path}: pixel payload size mismatch")
    data = np.frombuffer(raw[pos:], dtype=np.uint8).reshape(h, w)
    return IntensityImage(data.copy())


def save_map(topo_map: TopologicalMap, path) -> None:
    """Write a map bundle directory; overwrites files already present."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    intr = topo_map.intrinsics
    nodes = []
    for n in topo_map.nodes:
        qx, qy, qz, qw = n.pose.rotation.as_quat_xyzw()
        nodes.append(
            {
                "id": n.node_id,
                "timestamp": n.timestamp,
                "t": [float(x) for x in n.pose.translation],
                "q": [float(qx), float(qy), float(qz), float(qw)],
            }
        )
        write_tdm(path / f"depth_{n.node_id}.tdm", n.depth)
        write_pgm(path / f"image_{n.node_id}.pgm", n.image)
    manifest = {
        "version": MANIFEST_VERSION,
        "intrinsics": {
            "fx": intr.fx,
            "fy": intr.fy,
            "cx": intr.cx,
            "cy": intr.cy,
            "width": intr.width,
            "height": intr.height,
        },
        "nodes": nodes,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_map(path) -> TopologicalMap:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise InputError(f"map bundle not found: no manifest.json in {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ChecksumMismatch(f"{manifest_path}: invalid JSON ({exc})")
    version = manifest.get("version")
    if version != MANIFEST_VERSION:
        raise FormatVersionMismatch(
            f"{manifest_path}: version {version!r}, expected {MANIFEST_VERSION}"
        )
    ji = manifest["intrinsics"]
    intr = CameraIntrinsics(
        fx=ji["fx"], fy=ji["fy"], cx=ji["cx"], cy=ji["cy"],
        width=ji["width"], height=ji["height"],
    )
    topo_map = TopologicalMap(intr)
    for entry in sorted(manifest["nodes"], key=lambda e: e["id"]):
        depth = read_tdm(path / f"depth_{entry['id']}.tdm")
        image = read_pgm(path / f"image_{entry['id']}.pgm")
        pose = Pose(Rotation.from_quat_xyzw(entry["q"]), entry["t"])
        node = TopoNode(
            node_id=entry["id"], depth=depth, image=image,
            pose=pose, timestamp=entry["timestamp"], intrinsics=intr,
        )
        topo_map.insert_node(node)
    topo_map.build_index()
    return topo_map
