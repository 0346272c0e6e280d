"""
Runs, checkpoints and the command line
======================================

Drive the ``diffnet`` commands from Python: train a small model, resume
it, evaluate the checkpoint, and ask for recommendations.
"""

import tempfile
from pathlib import Path

from diffnet.checkpoint import load_checkpoint
from diffnet.cli import main
from diffnet.config import RunConfig

work = Path(tempfile.mkdtemp(prefix="diffnet-demo-"))
cfg = RunConfig(
    out_dir=str(work / "run"), synth_num_users=60, synth_num_items=80, synth_positives_per_user=8,
    synth_communities=4, embed_dim=16, max_epochs=3, learning_rate=0.01, num_repetitions=2,
)
config_path = work / "run.cfg"
config_path.write_text(cfg.to_text(), encoding="utf-8")
print(f"config digest {cfg.digest()[:16]}...")

# train for three epochs, then extend the same run to five
main(["train", str(config_path)])
main(["train", str(config_path), "--resume", "--max_epochs", "5"])
print((work / "run" / "train.log").read_text(), end="")

# the checkpoint is self-describing
ckpt = load_checkpoint(work / "run" / "checkpoint.bin")
print(f"checkpoint kind {ckpt.kind}, {len(ckpt.tensors)} tensors, best epoch {ckpt.meta['epoch']}")

main(["evaluate", str(work / "run" / "checkpoint.bin")])
print("top 5 for user 7:")
main(["recommend", str(work / "run" / "checkpoint.bin"), "--user", "7", "--top-n", "5"])
print(f"outputs in {work}")
