"""Run the bundled demo corpus end to end in stub mode.

Uses the packaged fixture config, so no network and no keys. Writes a
run directory under demos/out/runs and prints the rendered report.
"""

from pathlib import Path

import feedbacklab
from feedbacklab.cli import main

OUT = Path(__file__).parent / "out"
CONFIG = (
    Path(feedbacklab.__file__).parent / "fixtures" / "consensus_demo" / "config.json"
)


def run() -> None:
    runs_root = OUT / "runs"
    rc = main(
        [
            "consensus-eval",
            "--config",
            str(CONFIG),
            "--set",
            f"paths.runs_root={runs_root}",
        ]
    )
    if rc != 0:
        raise SystemExit(rc)

    run_dir = next(p for p in runs_root.iterdir() if p.is_dir())
    print(f"\nrun directory: {run_dir}\n")
    print((run_dir / "report.md").read_text())


if __name__ == "__main__":
    run()
