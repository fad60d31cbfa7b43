"""Remote car/trainer messaging, loop scheduling and off-track detection."""

from .detector import OfftrackDetectorConfig, dark_fraction, detect_offtrack, detector_agreement, edge_poses
from .loops import (
    CarNode,
    ControlNode,
    LoopStats,
    NoObservationError,
    RemoteEnv,
    SimulatedSession,
    car_loop,
    control_loop,
    period_us,
    run_periodic,
)
from .protocol import (
    EPISODE_END,
    EPISODE_RESET,
    MAX_PAYLOAD,
    TOPIC_CTRL,
    TOPIC_EPISODE,
    TOPIC_OBS,
    BadMagicError,
    BadTopicError,
    ControlPayload,
    EpisodePayload,
    Frame,
    LengthOverflowError,
    ObservationPayload,
    ProtocolError,
    TrailingDataError,
    TruncatedError,
    decode_frame,
    decode_prefix,
    encode_frame,
    header_size,
)
from .slot import LatestSlot, SlotEntry
from .transport import (
    Dispatcher,
    EventLoop,
    Publisher,
    SimulatedLink,
    TcpChannel,
    TcpServer,
    TransportClosed,
    connect,
    monotonic_us,
)

__all__ = [name for name in dir() if not name.startswith("_")]
