"""Exposure that spans tag rotations.

Alice and Bob sit 1 m apart from t=800 s to t=2000 s. Bob's tag changes at
900 s and 1800 s, so no single tag is heard for 15 minutes. Bob's upload
puts all three tags into one case group, and Alice's exposure to that group
adds up to about 20 minutes.
"""
from pathlib import Path

from bracelet.simulator import Scenario, run

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"

for name in ("cross_rotation_1200s.json", "short_contact_840s.json"):
    scenario = Scenario.from_json((SCENARIOS / name).read_text())
    report = run(scenario)
    final = report.final_decision("alice")
    print(f"{name}: uploads={[(u['agent'], u['tag_count']) for u in report.uploads]}")
    print(f"  alice exposure to the group: {final['max_group_exposure_s']:.0f} s"
          f" -> positive={final['positive']}")
    print(f"  alice risk timeline: {report.risk_timeline['alice']}")
