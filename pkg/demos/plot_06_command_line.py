"""
The same workflow from the command line
=======================================

Everything above is also reachable through the ``mtlnorm`` command.  This
script drives it in-process on a small configuration and lists what each
command writes.
"""

import tempfile
from pathlib import Path

from mtlnorm.cli import main

work = Path(tempfile.mkdtemp(prefix="mtlnorm-demo-"))
config = work / "small.ini"
config.write_text(
    "[data]\n"
    "num_samples = 400\n"
    "[optim]\n"
    "epochs = 2\n"
    "[analysis]\n"
    "tau = 0.5\n"
)

run = work / "run"
steps = [
    ["train", "--config", str(config), "--out", str(run)],
    ["analyze", str(run / "checkpoint.mtlck"), "--out", str(run)],
    ["prune-eval", str(run / "checkpoint.mtlck"), "--out", str(run)],
    ["interference", "--config", str(config), "--mode", "hps,tssbn", "--out", str(run)],
    ["report", str(run)],
]
for argv in steps:
    code = main(argv)
    print(f"mtlnorm {argv[0]:<13} exit {code}")

for path in sorted(run.iterdir()):
    print(f"  {path.name}")
