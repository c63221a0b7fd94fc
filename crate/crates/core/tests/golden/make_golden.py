"""Writes the reference frames in this directory with Python's struct module.

Run from this directory: python3 make_golden.py
"""
import struct

MAGIC = b"FPL1"


def frame(ty, payload):
    return MAGIC + struct.pack("<BI", ty, len(payload)) + payload


def f64s(values):
    return struct.pack("<I", len(values)) + b"".join(struct.pack("<d", v) for v in values)


FRAMES = {
    "join_request": frame(1, struct.pack("<IQQ", 2, 0x0123456789ABCDEF, 287)),
    "join_accept": frame(
        2,
        struct.pack("<IIId", 40, 5313, 24, 64.0)
        + struct.pack("<I", 3)
        + struct.pack("<III", 1, 2, 3)
        + struct.pack("<BB", 1, 1),
    ),
    "global_model": frame(3, struct.pack("<I", 7) + f64s([1.0, -0.5, 0.25]) + f64s([0.25, 0.75])),
    "local_update_plain": frame(4, struct.pack("<IIQd", 7, 3, 100, 0.125) + f64s([1.5, -2.0])),
    "local_update_masked": frame(
        5,
        struct.pack("<I", 7)
        + struct.pack("<III", 1, 7, 3)
        + struct.pack("<QQQ", 1, 2**64 - 1, 2**63)
        + struct.pack("<Qd", 50, 0.5),
    ),
    "round_ack": frame(6, struct.pack("<I", 7)),
    "shutdown": frame(7, b""),
    "protocol_error": frame(8, struct.pack("<HI", 11, 13) + b"arch mismatch"),
    "eval_request": frame(9, struct.pack("<I", 3) + f64s([0.0, 2.0])),
    "eval_report": frame(10, struct.pack("<IIdddd", 3, 2, 1.25, 2.5, 1.0, 0.75)),
}

for name, data in FRAMES.items():
    with open(f"{name}.bin", "wb") as fh:
        fh.write(data)
