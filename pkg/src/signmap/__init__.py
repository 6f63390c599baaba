"""signmap: geo-referenced traffic-sign metadata and change detection from
sparse SfM reconstructions plus per-image perception outputs."""

from .errors import ParseError, ValidationError
from .geodesy import (EcefCoord, EnuFrame, GeodeticCoord, SimilarityTransform,
                      apply_similarity, ecef_to_geodetic, enu_project, enu_unproject,
                      estimate_similarity, geodetic_to_ecef)
from .metadata import (MetadataEntry, MetadataGenConfig, MetadataStore,
                       cluster_candidates, generate_metadata, read_metadata,
                       write_metadata)
from .pose import (GpsSample, GpsTrace, PoseEstimate, PoseSource, ReferenceIndex,
                   estimate_pose, nearest_reference, propagate_orientation)
from .realtime import (DistanceMap, ObservationTrack, RangeGate,
                       generate_sparse_labels, locate_detection, pixel_to_wcs,
                       read_distance_map, update_tracks, write_distance_map)
from .semantics import (ClassPalette, Detection, DetectionSet, SegmentationMask,
                        filter_by_score, keypoints_supporting, segment_point_cloud)
from .sfm import (CameraIntrinsics, CameraModel, CameraPose, ImageRecord, Keypoint,
                  Reconstruction, ScenePoint, camera_center, parse_model,
                  project_point, write_model)
from .change import (ChangeDetectConfig, ChangeEvent, ChangeKind, PermanenceConfig,
                     TemporaryLayer, apply_to_temporary, detect_appearances,
                     detect_removals, promote_permanent)
from .metrics import (ChannelErrors, ConfusionMatrix, ErrorStats, change_confusion,
                      localization_error_stats, pixel_errors, pose_error_vs_trace)
from .synth import (NoiseConfig, SignSpec, SyntheticScene, TrajectoryPoint,
                    build_world, mutate_scene, preset_scene, render_scene)

__version__ = "0.1.0"
