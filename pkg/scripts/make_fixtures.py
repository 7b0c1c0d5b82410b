"""Regenerate the golden files under tests/fixtures.

The checked-in files are the reference; tests compare freshly encoded bytes
against them, so only rerun this after an intentional format change.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from earlycrop.data import save_checkpoint, write_idx
from earlycrop.lifecycle import DetectorState
from earlycrop.models import Layer, Model


def golden_idx() -> np.ndarray:
    return np.arange(24, dtype=np.uint8).reshape(2, 3, 4) * 10


def golden_model() -> Model:
    w1 = np.array([[0.5, -1.0], [0.25, 2.0], [-0.75, 0.125]])
    b1 = np.array([0.1, -0.2, 0.0])
    m1 = np.array([[1, 0], [1, 1], [0, 1]], dtype=bool)
    w2 = np.array([[1.5, -0.5, 0.25]])
    return Model(
        [
            Layer("dense", w1 * m1, b1, "tanh", weight_mask=m1),
            Layer("dense", w2, np.array([0.05]), "identity"),
        ],
        head="regression",
    )


def golden_detector() -> DetectorState:
    state = DetectorState.start(np.array([0.0, 1.0, -2.0]), th=0.05)
    state.delta_history = [0.0, 1.0, 1.5]
    state.delta1 = 1.0
    state.last_epoch = 2
    return state


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dir", default=str(Path(__file__).resolve().parents[1] / "tests" / "fixtures"))
    args = parser.parse_args()
    out = Path(args.dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "golden_2x3x4.idx", golden_idx())
    save_checkpoint(golden_model(), out / "golden_mlp.ckpt", detector=golden_detector())
    for lock in out.glob("*.lock"):
        lock.unlink()
    print(f"wrote fixtures to {out}")


if __name__ == "__main__":
    main()
