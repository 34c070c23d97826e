"""Fit a path-loss model from calibration readings and estimate distances."""
import math

import numpy as np

from bracelet.distance import CalibrationSample, estimate_distance, fit_path_loss, is_violation

TX = -4.0
rng = np.random.default_rng(7)

# Readings taken at known distances, with 2 dB of shadowing.
samples = []
for d in (0.5, 1, 2, 3, 4, 6, 8):
    for _ in range(20):
        loss = 40.0 + 20.0 * math.log10(d) + rng.normal(0, 2.0)
        samples.append(CalibrationSample(TX, TX - loss, d))

model = fit_path_loss(samples)
print(f"fitted n={model.n:.3f} PL0={model.pl0_db:.2f} dB rmse={model.rmse_db:.2f} dB")

for rssi in (-44, -50, -56, -64):
    d = estimate_distance(model, TX, rssi)
    flag = "violation" if is_violation(d) else "ok"
    print(f"rssi {rssi} dBm -> {d:5.2f} m  {flag}")
