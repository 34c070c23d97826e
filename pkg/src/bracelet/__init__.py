"""Privacy-preserving social-distancing bracelet: protocol, device runtime,
exposure matching, cloud service, RFID access codec, and fleet simulator."""

from .device import (
    ContactRecord,
    Device,
    DeviceConfig,
    OwnTagRecord,
    RiskLevel,
    SensorSample,
    SymptomState,
    UploadBundle,
    classify_risk,
)
from .distance import (
    CalibrationSample,
    PathLossModel,
    estimate_distance,
    fit_path_loss,
    is_violation,
)
from .matching import (
    CaseGroup,
    ExposureDecision,
    InfectedIndex,
    local_match,
    match_contacts,
    register_case,
)
from .protocol import (
    Beacon,
    decode_beacon,
    derive_address,
    derive_tag,
    encode_beacon,
    epoch_of,
)
from .rfid import AccessPolicy, access_decision, decode_risk, encode_risk
from .cloud import CloudClient, CloudService
from .simulator import Scenario, SimReport, channel_rssi, run, score

__version__ = "0.1.0"
