"""Round-trip the on-disk formats and drive the command line.

Label maps are binary PGM (255 = unlabeled), pyramids are PYRP containers
(kind 0 ground truth, kind 1 prediction) and checkpoints are PYRC files.
The same flows are available as ``specfuse encode|fuse|relabel|...``.
"""

import tempfile
from pathlib import Path

import numpy as np

from specfuse import io
from specfuse.cli import main
from specfuse.synth import SynthConfig, gen_sample

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    _, labels = gen_sample(SynthConfig(seed=9, dont_care_rate=0.0), 0)
    io.write_label_map(tmp / "labels.pgm", labels)

    main(["encode", "--labels", str(tmp / "labels.pgm"), "--levels", "4", "--finest-stride", "1", "--num-classes", "6",
          "--out", str(tmp / "gt.pyrp")])
    main(["encode", "--labels", str(tmp / "labels.pgm"), "--levels", "4", "--finest-stride", "1", "--num-classes", "6",
          "--out", str(tmp / "pred.pyrp"), "--one-hot"])
    spec, h, w, kind = io.read_header((tmp / "gt.pyrp").read_bytes())
    print(f"gt.pyrp: L={spec.num_levels} s_L={spec.finest_stride} C={spec.num_classes} {h}x{w} kind {kind}, "
          f"{(tmp / 'gt.pyrp').stat().st_size} bytes")

    main(["fuse", "--sem", str(tmp / "pred.pyrp"), "--tau", "0.9", "--out-labels", str(tmp / "fused.pgm"),
          "--out-assignment", str(tmp / "assign.pgm"), "--stats", str(tmp / "stats.csv")])
    print("fused PGM equals input:", np.array_equal(io.read_label_map(tmp / "fused.pgm"), labels))
    print((tmp / "stats.csv").read_text())

    main(["relabel", "--gt", str(tmp / "gt.pyrp"), "--pred-unity", str(tmp / "pred.pyrp"),
          "--policy", "final", "--out", str(tmp / "relabeled.pyrp")])

    code = main(["fuse", "--sem", str(tmp / "gt.pyrp"), "--out-labels", str(tmp / "x.pgm"),
                 "--out-assignment", str(tmp / "y.pgm")])
    print("fusing a ground-truth container exits with", code)
