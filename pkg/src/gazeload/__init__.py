"""Real-time cognitive load estimation from pupil diameter."""

__version__ = "0.1.0"

from .analysis import (CorrelationResult, SessionFeatures, StatsError, correlate_features,
                       count_peaks, p_value, pearson_r)
from .calibration import CalibrationError, CalibrationProfile, compute_profile, run_calibration
from .estimator import (EstimatorState, FrameSample, LoadEstimate, Pipeline, current_estimate,
                        filter_sample, ingest_frame, merge_eye_pair)
from .protocol import (Announce, DeviceEndpoint, Eye, Keepalive, KeepaliveOp, ProtocolError,
                       PupilSample, parse_datagram, receive_stream, serialize_datagram)
from .session import (EventMarker, Footer, FormatError, Header, Session, SessionWriter,
                      append_record, extract_event_trace, load_session)
from .simulator import ScenarioConfig, generate_sample, iter_scenario, run_server
