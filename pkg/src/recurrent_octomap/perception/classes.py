from enum import IntEnum


class SemanticClass(IntEnum):
    BACKGROUND = 0
    CAR = 1
    PEDESTRIAN = 2
    CYCLIST = 3
    DONT_CARE = 4


N_CLASSES = 4  # DontCare is a ground-truth marker only, never predicted
CLASS_NAMES = ("background", "car", "pedestrian", "cyclist")
