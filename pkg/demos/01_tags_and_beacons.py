"""Ephemeral tags and the 24-byte beacon.

A bracelet never broadcasts its seed. Each 15-minute epoch it derives a
fresh tag and radio address from the seed, so two beacons from different
epochs cannot be linked by a listener.
"""
from bracelet import protocol

seed = bytes(range(32))  # fixed so the output is reproducible

for t in (0, 899, 900, 1800):
    epoch = protocol.epoch_of(t)
    beacon = protocol.Beacon.for_epoch(seed, epoch)
    frame = protocol.encode_beacon(beacon)
    print(f"t={t:5d}s epoch={epoch}  tag={beacon.tag.hex()}  "
          f"addr={beacon.address.hex()}  frame={len(frame)} bytes")

# A receiver only sees the frame.
frame = protocol.encode_beacon(protocol.Beacon.for_epoch(seed, 1))
decoded = protocol.decode_beacon(frame)
print("decoded tx power:", decoded.tx_power_dbm, "dBm")
print("seed visible in frame:", seed in frame)
