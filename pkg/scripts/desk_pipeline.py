"""Generate, train and evaluate one desk configuration end to end.

    python scripts/desk_pipeline.py configs/poisson_gauss.cfg
"""
import glob
import os
import sys

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app import run  # noqa: E402
from config import Config  # noqa: E402


def latest_run(command: str, root: str) -> str:
    runs = sorted(glob.glob(os.path.join(root, f"*-{command}*")), key=os.path.getmtime)
    if not runs:
        raise SystemExit(f"no {command} run found under {root}")
    return runs[-1]


def main(argv):
    if not argv:
        print(__doc__)
        return 1
    config, extra = argv[0], argv[1:]
    root = Config.output_dir()
    for command in ("generate", "train"):
        code = run([command, "--config", config, *extra])
        if code:
            return code
    checkpoint = os.path.join(latest_run("train", root), "checkpoints", "final.gck")
    print(f"🤖 Evaluating {checkpoint}")
    return run(["evaluate", "--config", config, "--checkpoint", checkpoint, *extra])


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
