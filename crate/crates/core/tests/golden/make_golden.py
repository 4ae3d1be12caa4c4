"""Writes the KNNF golden corpus with nothing but `struct`.

Run from this directory: python3 make_golden.py
"""
import math
import struct


def knnf(rows, rate, version=1, t=None, d=None):
    t = len(rows) if t is None else t
    d = (len(rows[0]) if rows else 0) if d is None else d
    head = b"KNNF" + struct.pack("<IIIf", version, t, d, rate)
    return head + b"".join(struct.pack("<%df" % len(r), *r) for r in rows)


def write(name, data):
    with open(name, "wb") as f:
        f.write(data)


write("minimal.knnf", knnf([[1.0, 2.0]], 50.0))
write(
    "three_by_four.knnf",
    knnf(
        [
            [0.5, -0.0, 1e-40, 3.4028234663852886e38],
            [-1.25, 2.0 ** -20, 7.0, -3.5],
            [0.1, 0.2, 0.3, 0.4],
        ],
        100.0,
    ),
)
write("bad_magic.knnf", b"KNNX" + knnf([[1.0, 2.0]], 50.0)[4:])
write("version_two.knnf", knnf([[1.0, 2.0]], 50.0, version=2))
write("truncated.knnf", knnf([[1.0, 2.0]], 50.0)[:-3])
write("short_header.knnf", knnf([[1.0, 2.0]], 50.0)[:10])
write("nan_payload.knnf", knnf([[1.0, math.nan]], 50.0))
write("zero_frames.knnf", knnf([], 50.0, t=0, d=2))
write("trailing_bytes.knnf", knnf([[1.0, 2.0]], 50.0) + b"\0\0\0\0")
