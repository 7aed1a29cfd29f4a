"""Drive the CLI the way a batch experiment would, then read the manifest.

Writes a reduced-scale synthetic config, runs `fedstat synth`, and prints
the consolidated report.  The out directory holds comparison.csv and a
manifest.json echoing the fully resolved config, so a run is diffable
and byte-reproducible.

Run:  python3 demos/batch_tables.py        (about a minute)
"""

import json
import os
import subprocess
import sys
import tempfile


def main():
    out = tempfile.mkdtemp(prefix="fedstat_demo_")
    cfg_path = os.path.join(out, "cfg.json")
    with open(cfg_path, "w", encoding="utf-8") as fh:
        json.dump({"peers_per_cluster": 6, "rounds": 60, "n_per_client": 80,
                   "local_epochs": 20, "batch_size": 80, "seed": 7}, fh)

    cmd = [sys.executable, "-m", "fedstat.cli", "synth",
           "--config", cfg_path, "--out", out]
    print("$", " ".join(cmd), flush=True)
    subprocess.run(cmd, check=True)

    print(flush=True)
    subprocess.run([sys.executable, "-m", "fedstat.cli", "report",
                    "--manifest", os.path.join(out, "manifest.json")],
                   check=True)

    with open(os.path.join(out, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    print(f"\nwall time {manifest['wall_time_s']}s, "
          f"outputs in {out}")


if __name__ == "__main__":
    main()
