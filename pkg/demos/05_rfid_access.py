"""Risk level on the RFID tag and the door reader's decision."""
from bracelet import rfid
from bracelet.device import RiskLevel
from bracelet.errors import BraceletError

now_epoch = 2000
for risk, issued in ((RiskLevel.NO_RISK, 1990), (RiskLevel.LOW_RISK, 1999),
                     (RiskLevel.HIGH_RISK, 1999), (RiskLevel.NO_RISK, 1800)):
    payload = rfid.encode_risk(risk, issued)
    verdict = rfid.access_decision(rfid.decode_risk(payload), now_epoch)
    print(f"{payload.hex()}  {risk.label:8s} issued {issued}: "
          f"{'granted' if verdict.granted else 'denied (' + verdict.reason + ')'}")

# A single flipped bit is caught before the reader trusts the payload.
tampered = bytearray(rfid.encode_risk(RiskLevel.HIGH_RISK, 1999))
tampered[3] ^= 0x02
try:
    rfid.decode_risk(bytes(tampered))
except BraceletError as exc:
    print("tampered payload rejected:", type(exc).__name__)
