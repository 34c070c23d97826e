"""A noisy office day with five wearers and cloud-side matching."""
from pathlib import Path

from bracelet.simulator import Scenario, run

path = Path(__file__).resolve().parents[1] / "scenarios" / "office_day.json"
scenario = Scenario.from_json(path.read_text())
report = run(scenario)

print("counts:")
for key, value in sorted(report.counts.items()):
    print(f"  {key:18s} {value}")
print("uploads:", [(u["agent"], u["t_s"]) for u in report.uploads])
print("detected pairs:", report.detected_pairs)
print("ground truth (s within 2 m):")
for pair, seconds in sorted(report.ground_truth_exposure_s.items()):
    print(f"  {pair:16s} {seconds:.0f}")
print("score:", report.score)

# The same file with the same seed reproduces the report byte for byte.
assert run(Scenario.from_json(path.read_text())).to_json() == report.to_json()
print("rerun identical: True")
