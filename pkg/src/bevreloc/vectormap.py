"""Vector navigation-map data: geometry containers, OSM ingestion, JSON io.

Geometry lives in a local metric frame (x east / y north for OSM data;
generated worlds define their own frame).  Lane centerlines are open
polylines with an optional per-lane rendered width, buildings are simple
closed polygons with a height used only by the perspective renderer, and
nodes are tagged points of interest.
"""

from __future__ import annotations

import json
import math
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .se2 import PoseOffset, transform_points

EARTH_RADIUS_M = 6_378_137.0

#: OSM node tags accepted as PoI nodes, mapped to the stored kind.
DEFAULT_NODE_TAGS = {
    ("highway", "traffic_signals"): "traffic-signal",
    ("man_made", "pole"): "pole",
    ("highway", "street_lamp"): "pole",
}

DEFAULT_BUILDING_HEIGHT = 12.0
METERS_PER_LEVEL = 3.0


class OsmParseError(ValueError):
    pass


def _segments_intersect(p1, p2, p3, p4) -> bool:
    d = (p2[0] - p1[0]) * (p4[1] - p3[1]) - (p2[1] - p1[1]) * (p4[0] - p3[0])
    if d == 0:
        return False
    t = ((p3[0] - p1[0]) * (p4[1] - p3[1]) - (p3[1] - p1[1]) * (p4[0] - p3[0])) / d
    u = ((p3[0] - p1[0]) * (p2[1] - p1[1]) - (p3[1] - p1[1]) * (p2[0] - p1[0])) / d
    return 0 < t < 1 and 0 < u < 1


def polygon_is_simple(poly: np.ndarray) -> bool:
    """True when no two non-adjacent edges of the closed ring intersect."""
    n = len(poly)
    edges = [(poly[i], poly[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue  # adjacent through the closure
            if _segments_intersect(*edges[i], *edges[j]):
                return False
    return True


def point_in_polygon(x: float, y: float, poly: np.ndarray) -> bool:
    """Even-odd containment test."""
    inside = False
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 > y) != (y2 > y) and x < (x2 - x1) * (y - y1) / (y2 - y1) + x1:
            inside = not inside
    return inside


@dataclass
class Building:
    polygon: np.ndarray  # (N, 2) ring without a repeated closing vertex
    height: float = DEFAULT_BUILDING_HEIGHT

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=float).reshape(-1, 2)
        if len(self.polygon) < 3:
            raise ValueError("building polygon needs at least 3 vertices")
        if not polygon_is_simple(self.polygon):
            raise ValueError("building polygon is self-intersecting")


@dataclass
class MapNode:
    x: float
    y: float
    kind: str = "traffic-signal"

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class VectorMap:
    """Lanes, buildings and PoI nodes in a local metric frame."""

    lanes: list[np.ndarray] = field(default_factory=list)
    buildings: list[Building] = field(default_factory=list)
    nodes: list[MapNode] = field(default_factory=list)
    bounds: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    lane_widths: list[float] | None = None  # rendered width per lane; None -> default

    def __post_init__(self):
        self.lanes = [np.asarray(l, dtype=float).reshape(-1, 2) for l in self.lanes]
        if self.lane_widths is not None and len(self.lane_widths) != len(self.lanes):
            raise ValueError("lane_widths must match lanes")

    def is_empty(self) -> bool:
        return not (self.lanes or self.buildings or self.nodes)

    def transform(self, xi: PoseOffset) -> "VectorMap":
        """Rigidly transform every element (bounds become the moved bbox)."""
        lanes = [transform_points(xi, l) for l in self.lanes]
        buildings = [Building(transform_points(xi, b.polygon), b.height) for b in self.buildings]
        nodes = [MapNode(*transform_points(xi, n.xy)[0], kind=n.kind) for n in self.nodes]
        pts = [p for l in lanes for p in l] + \
              [p for b in buildings for p in b.polygon] + \
              [n.xy for n in nodes]
        if pts:
            arr = np.asarray(pts)
            bounds = (arr[:, 0].min(), arr[:, 1].min(), arr[:, 0].max(), arr[:, 1].max())
        else:
            bounds = self.bounds
        return VectorMap(lanes, buildings, nodes, bounds, self.lane_widths)

    def building_at(self, x: float, y: float) -> bool:
        return any(point_in_polygon(x, y, b.polygon) for b in self.buildings)

    def to_json_dict(self) -> dict:
        return {
            "version": 1,
            "bounds": [float(v) for v in self.bounds],
            "lanes": [l.tolist() for l in self.lanes],
            "lane_widths": None if self.lane_widths is None else [float(w) for w in self.lane_widths],
            "buildings": [{"polygon": b.polygon.tolist(), "height": b.height} for b in self.buildings],
            "nodes": [{"x": n.x, "y": n.y, "kind": n.kind} for n in self.nodes],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "VectorMap":
        return VectorMap(
            lanes=[np.asarray(l) for l in d["lanes"]],
            buildings=[Building(np.asarray(b["polygon"]), b["height"]) for b in d["buildings"]],
            nodes=[MapNode(n["x"], n["y"], n["kind"]) for n in d["nodes"]],
            bounds=tuple(d["bounds"]),
            lane_widths=d.get("lane_widths"),
        )

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True) + "\n")

    @staticmethod
    def load_json(path) -> "VectorMap":
        return VectorMap.from_json_dict(json.loads(Path(path).read_text()))


def _project_equirectangular(lat, lon, origin):
    """Local meters about (lat0, lon0); adequate for extracts up to ~2 km."""
    lat0, lon0 = origin
    x = EARTH_RADIUS_M * math.cos(math.radians(lat0)) * math.radians(lon - lon0)
    y = EARTH_RADIUS_M * math.radians(lat - lat0)
    return x, y


def _parse_height(tags: dict) -> float:
    raw = tags.get("height")
    if raw:
        try:
            return float(raw.replace("m", "").strip())
        except ValueError:
            pass
    levels = tags.get("building:levels")
    if levels:
        try:
            return float(levels) * METERS_PER_LEVEL
        except ValueError:
            pass
    return DEFAULT_BUILDING_HEIGHT


def parse_osm(xml_bytes: bytes, projection_origin: tuple[float, float],
              node_tags: dict | None = None) -> VectorMap:
    """Build a VectorMap from an OSM XML extract.

    Ways tagged ``highway=*`` become lanes, ways and multipolygon-relation
    outers tagged ``building=*`` become buildings, and nodes matching the
    tag whitelist become PoI nodes.  Everything else is discarded.
    Coordinates are projected to local meters about ``projection_origin``
    (east = +x, north = +y).
    """
    node_tags = DEFAULT_NODE_TAGS if node_tags is None else node_tags
    try:
        root = ET.fromstring(xml_bytes)
    except ET.ParseError as e:
        line, col = e.position
        raise OsmParseError(f"malformed OSM XML at line {line}, column {col}: {e.msg}") from e

    coords: dict[str, tuple[float, float]] = {}
    map_nodes: list[MapNode] = []
    for el in root.iter("node"):
        nid = el.get("id")
        lat, lon = float(el.get("lat")), float(el.get("lon"))
        xy = _project_equirectangular(lat, lon, projection_origin)
        coords[nid] = xy
        tags = {t.get("k"): t.get("v") for t in el.findall("tag")}
        for (k, v), kind in node_tags.items():
            if tags.get(k) == v:
                map_nodes.append(MapNode(xy[0], xy[1], kind))
                break

    lanes: list[np.ndarray] = []
    buildings: list[Building] = []
    ways: dict[str, list[str]] = {}
    way_tags: dict[str, dict] = {}
    for el in root.iter("way"):
        wid = el.get("id")
        refs = [nd.get("ref") for nd in el.findall("nd")]
        tags = {t.get("k"): t.get("v") for t in el.findall("tag")}
        ways[wid] = refs
        way_tags[wid] = tags
        pts = np.array([coords[r] for r in refs if r in coords])
        if len(pts) < 2:
            continue
        if "highway" in tags:
            lanes.append(pts)
        elif "building" in tags:
            _append_building(buildings, pts, _parse_height(tags), wid)

    for el in root.iter("relation"):
        tags = {t.get("k"): t.get("v") for t in el.findall("tag")}
        if "building" not in tags:
            continue
        for mem in el.findall("member"):
            if mem.get("type") == "way" and mem.get("role") in ("outer", ""):
                refs = ways.get(mem.get("ref"), [])
                pts = np.array([coords[r] for r in refs if r in coords])
                if len(pts) >= 3:
                    _append_building(buildings, pts, _parse_height(tags), mem.get("ref"))

    pts = [p for l in lanes for p in l] + \
          [p for b in buildings for p in b.polygon] + \
          [n.xy for n in map_nodes]
    if not pts:
        warnings.warn("OSM extract contained no retained map elements")
        return VectorMap(bounds=(0.0, 0.0, 0.0, 0.0))
    arr = np.asarray(pts)
    bounds = (arr[:, 0].min(), arr[:, 1].min(), arr[:, 0].max(), arr[:, 1].max())
    return VectorMap(lanes, buildings, map_nodes, bounds)


def _append_building(buildings: list[Building], pts: np.ndarray, height: float, wid):
    if np.allclose(pts[0], pts[-1]):
        pts = pts[:-1]  # drop the repeated closing vertex
    if len(pts) < 3:
        return
    try:
        buildings.append(Building(pts, height))
    except ValueError:
        warnings.warn(f"skipping degenerate building way {wid}")
