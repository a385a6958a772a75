"""Default semantic label map for outdoor driving scenes.

Class ids are 1-based; 0 is reserved for "unlabeled/empty" and never appears
inside a VoxelScene.
"""

from __future__ import annotations

CLASS_NAMES = {
    1: "car",
    2: "bicycle",
    3: "motorcycle",
    4: "truck",
    5: "other-vehicle",
    6: "person",
    7: "bicyclist",
    8: "motorcyclist",
    9: "road",
    10: "parking",
    11: "sidewalk",
    12: "other-ground",
    13: "building",
    14: "fence",
    15: "vegetation",
    16: "trunk",
    17: "terrain",
    18: "pole",
    19: "traffic-sign",
}

NUM_CLASSES = len(CLASS_NAMES)

# Classes that are predominantly in motion; dropped during map aggregation and
# ignored in mIoU reporting.
MOVING_CLASS_IDS = frozenset({2, 3, 6, 7, 8})


def class_palette(class_count: int) -> dict[int, tuple[int, int, int]]:
    """Deterministic RGB palette for class ids 1..class_count.

    Named classes get fixed colors; ids beyond the table get evenly spaced
    hues so any class count renders distinguishably.
    """
    fixed = {
        1: (100, 150, 245),
        2: (100, 230, 245),
        3: (30, 60, 150),
        4: (80, 30, 180),
        5: (0, 0, 255),
        6: (255, 30, 30),
        7: (255, 40, 200),
        8: (150, 30, 90),
        9: (255, 0, 255),
        10: (255, 150, 255),
        11: (75, 0, 75),
        12: (175, 0, 75),
        13: (255, 200, 0),
        14: (255, 120, 50),
        15: (0, 175, 0),
        16: (135, 60, 0),
        17: (150, 240, 80),
        18: (255, 240, 150),
        19: (255, 0, 0),
    }
    palette = {}
    for cid in range(1, class_count + 1):
        if cid in fixed:
            palette[cid] = fixed[cid]
        else:
            hue = (cid * 0.6180339887498949) % 1.0
            palette[cid] = _hsv_to_rgb(hue, 0.65, 0.95)
    return palette


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[int, int, int]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    r, g, b = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return (int(r * 255), int(g * 255), int(b * 255))
