"""End-to-end pipeline on a small phantom cohort via the CLI entry point.

Equivalent shell session:

    vce gen   --config cfg.json
    vce train --config cfg.json --set model.role=e2e
    vce train --config cfg.json --set model.role=fm
    vce sample --config cfg.json --set model.role=fm
    vce eval  --config cfg.json
    vce sweep --config cfg.json
"""

import json
import os

from vce.cli import main

out = os.path.join(os.path.dirname(__file__), "out", "pipeline")
cfg = {
    "out_dir": out,
    "phantom": {"height": 32, "width": 32, "depth": 16, "tumor_count": 2,
                "tumor_radius": [4.0, 7.0], "volumes": 8},
    "split": {"train": 6, "test": 1},
    "model": {"base_channels": 8, "levels": 2},
    "train": {"epochs": 10, "batch_size": 8},
    "sampler": {"ensemble": 8, "steps": 10},
}
os.makedirs(out, exist_ok=True)
cfg_path = os.path.join(out, "cfg.json")
with open(cfg_path, "w") as f:
    json.dump(cfg, f, indent=2)

for argv in (["gen", "--config", cfg_path],
             ["train", "--config", cfg_path, "--set", "model.role=e2e"],
             ["train", "--config", cfg_path, "--set", "model.role=fm"],
             ["sample", "--config", cfg_path, "--set", "model.role=fm"],
             ["eval", "--config", cfg_path],
             ["sweep", "--config", cfg_path]):
    code = main(argv)
    assert code == 0, f"{argv} exited {code}"

print("\nreports:")
with open(os.path.join(out, "reports", "metrics.csv")) as f:
    print(f.read())
