"""Regenerate the regression snapshots in this directory.

Run from the repository root: ``python3 tests/golden/make_golden.py``.
"""

import json
import os

from rtelab.albedo import assemble_gamma
from rtelab.transport import AbsorptionField, Medium, k1_spectral_norm

HERE = os.path.dirname(os.path.abspath(__file__))

if __name__ == "__main__":
    gap = 1.0 - k1_spectral_norm(Medium(0.2))
    with open(os.path.join(HERE, "k1_gap.json"), "w") as fh:
        json.dump({"epsilon": 0.2, "sigma_s": 1.0, "n_r": 48, "n_theta": 96, "n_dir": 64, "gap": gap}, fh, indent=2)
        fh.write("\n")
    G = assemble_gamma(Medium(0.05, 1.0, AbsorptionField.radial_bump(0.5, 0.45)), 10)
    G.to_csv(os.path.join(HERE, "gamma_radial_eps0p05_L10.csv"))
