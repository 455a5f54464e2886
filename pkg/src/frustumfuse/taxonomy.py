"""Class lists, parent groups, frequency groups, evaluation ranges and mean sizes."""
from __future__ import annotations

CLASSES = (
    "car", "truck", "trailer", "bus", "construction_vehicle", "bicycle", "motorcycle",
    "emergency_vehicle", "adult", "child", "police_officer", "construction_worker",
    "stroller", "personal_mobility", "pushable_pullable", "debris", "traffic_cone", "barrier",
)

PARENT = {
    **{c: "vehicle" for c in ("car", "truck", "trailer", "bus", "construction_vehicle",
                               "bicycle", "motorcycle", "emergency_vehicle")},
    **{c: "pedestrian" for c in ("adult", "child", "police_officer", "construction_worker",
                                  "stroller", "personal_mobility")},
    **{c: "movable_object" for c in ("pushable_pullable", "debris", "traffic_cone", "barrier")},
}

FREQUENCY = {
    **{c: "Many" for c in ("car", "adult", "traffic_cone", "barrier")},
    **{c: "Medium" for c in ("truck", "trailer", "bus", "construction_vehicle", "bicycle", "motorcycle")},
    **{c: "Few" for c in ("emergency_vehicle", "child", "police_officer", "construction_worker",
                           "stroller", "personal_mobility", "pushable_pullable", "debris")},
}

PARENT_RANGE = {"vehicle": 50.0, "pedestrian": 40.0, "movable_object": 30.0}

# mean (length, width, height) in meters
SIZES = {
    "car": (4.6, 1.9, 1.7),
    "truck": (6.9, 2.5, 2.8),
    "trailer": (12.0, 2.9, 3.9),
    "bus": (11.0, 2.9, 3.5),
    "construction_vehicle": (6.4, 2.8, 3.2),
    "bicycle": (1.7, 0.6, 1.3),
    "motorcycle": (2.1, 0.8, 1.5),
    "emergency_vehicle": (5.0, 2.0, 1.9),
    "adult": (0.7, 0.7, 1.75),
    "child": (0.5, 0.5, 1.2),
    "police_officer": (0.7, 0.7, 1.8),
    "construction_worker": (0.7, 0.7, 1.8),
    "stroller": (0.9, 0.6, 1.1),
    "personal_mobility": (1.2, 0.6, 1.4),
    "pushable_pullable": (0.8, 0.6, 1.0),
    "debris": (1.0, 1.0, 0.5),
    "traffic_cone": (0.4, 0.4, 1.0),
    "barrier": (0.5, 2.5, 1.0),
}

# camera proposals for these classes are removed before refinement
CAMERA_BLACKLIST = ("car", "trailer", "truck", "bus", "construction_vehicle")

METRIC_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)


def class_index(name: str, classes=CLASSES) -> int:
    return list(classes).index(name)
