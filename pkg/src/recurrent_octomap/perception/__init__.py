"""Single-scan semantic understanding: objectness clustering, point and object
MLPs with max pooling, and propagation of object features back to points."""
from .classes import CLASS_NAMES, N_CLASSES, SemanticClass
from .clustering import ClusteringConfig, ObjectnessBox, background_box, cluster_objectness, cluster_points
from .corpus import make_object, make_shapes_corpus
from .model import (PerceptionModel, PointFeatureSet, ScanPerception, classify_object,
                    extract_point_features, init_perception_model, load_perception, local_coordinates,
                    perceive, propagate_to_points, save_perception)
from .scan import PointCloudScan, read_corpus, read_scan, write_corpus, write_scan
from .training import (LabeledObject, PerceptionTrainConfig, compute_prototypes, extract_objects,
                       majority_label, object_accuracy, predict_objects, rotate_yaw, train_perception,
                       yaw_robustness)
