"""Regenerate window.csv and window_golden.json.

Run from the repository root: ``python3 tests/fixtures/make_window.py``.
"""

import json
import math
from pathlib import Path

import numpy as np

from soilmap.estimator import fit_soil_properties, synth_window
from soilmap.fee import PARAM_NAMES, SoilProperties

HERE = Path(__file__).parent
TRUTH = SoilProperties(c=6000.0, phi=math.radians(32.0), c_a=1500.0,
                       delta=math.radians(14.0), gamma=17500.0)


def main():
    rng = np.random.default_rng(20240611)
    P = 24
    rho = np.radians(np.linspace(70.0, 95.0, P))
    alpha = np.radians(np.linspace(-3.0, 4.0, P))
    d = 0.05 + 0.25 * (0.5 + 0.5 * np.sin(np.linspace(0.0, 3.0 * math.pi, P)))
    Q = np.linspace(0.0, 4000.0, P)
    win = synth_window(TRUTH, alpha, rho, 1.85, d, Q, noise_std=20.0, rng=rng)
    win.to_csv(HERE / "window.csv")
    est = fit_soil_properties(win)
    golden = {"truth": dict(zip(PARAM_NAMES, TRUTH.as_array().tolist())),
              "theta": dict(zip(PARAM_NAMES, est.theta.as_array().tolist())),
              "std": dict(zip(PARAM_NAMES, est.std.tolist()))}
    (HERE / "window_golden.json").write_text(json.dumps(golden, indent=1) + "\n")


if __name__ == "__main__":
    main()
