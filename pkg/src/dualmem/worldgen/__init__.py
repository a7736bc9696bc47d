from .layout import (
    OBJECT_CLASSES,
    ROOM_TYPES,
    EnvironmentLayout,
    LayoutConfig,
    LayoutObject,
    Room,
    generate_layout,
)
from .render import (
    N_CHANNELS,
    WINDOW,
    Observation,
    PointCloud,
    Pose,
    render_observation,
    sample_pointcloud,
)
from .expert import ACTION_NAMES, FORWARD, LEFT, RIGHT, STOP, apply_action, bfs_distances, expert_path
