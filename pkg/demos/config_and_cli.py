"""
Experiments from a config file
==============================

The ``sparsenet`` command reads an INI file describing the network, the
training schedule, the plan and the data. This script drives the same entry
point in-process; each call mirrors a shell command such as

    sparsenet ratio --config configs/face.cfg --plan "f:1/256,5b:1/128"
"""
import tempfile
from pathlib import Path

from sparsenet import dump_config, load_config
from sparsenet.cli import main

root = Path(__file__).resolve().parent.parent
face = str(root / "configs" / "face.cfg")

main(["ratio", "--config", face])
main(["ratio", "--config", face, "--plan", "f:1/256,5b:1/128,5a:1/4", "--verbose"])

# %%
# Every setting is explicit once dumped, and the dump parses back to the same config.
cfg = load_config(face)
print(dump_config(cfg).split("[train]")[0])

# %%
# A short end-to-end run on a few-step model: pipeline, evaluation, analysis.
tiny = str(root / "tests" / "data" / "tiny.cfg")
out = Path(tempfile.mkdtemp())
main(["pipeline", "--config", tiny, "--out", str(out)])
main(["eval", "--config", tiny, "--checkpoint", str(out / "N2.spcn")])
main(["analyze", "--config", tiny, "--checkpoint", str(out / "N2.spcn"), "--before", str(out / "N1.spcn"),
      "--layer", "f", "--out", str(out / "analysis")])
print((out / "analysis" / "corr_tracking.csv").read_text())
