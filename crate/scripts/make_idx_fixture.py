#!/usr/bin/env python3
"""Write the two-image IDX fixture used by the parser tests.

Pixel (i, r, c) of image i holds (37 * i + 11 * r + 3 * c) % 256.
Labels are [7, 2].
"""

import struct
import sys
from pathlib import Path

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("crates/core/tests/fixtures")
out.mkdir(parents=True, exist_ok=True)
with open(out / "two-images-idx3-ubyte", "wb") as f:
    f.write(struct.pack(">IIII", 2051, 2, 28, 28))
    for i in range(2):
        for r in range(28):
            for c in range(28):
                f.write(bytes([(37 * i + 11 * r + 3 * c) % 256]))
with open(out / "two-labels-idx1-ubyte", "wb") as f:
    f.write(struct.pack(">II", 2049, 2))
    f.write(bytes([7, 2]))
