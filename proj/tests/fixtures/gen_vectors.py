#!/usr/bin/env python3
"""Regenerates the golden frame fixtures from a bit-by-bit CRC reference.

Independent of the C++ codec: frames are hand-assembled from the documented
layout (docs/protocol.md).
"""
import pathlib


def crc16_ccitt_false(data: bytes) -> int:
    crc = 0xFFFF
    for byte in data:
        for i in range(8):
            bit = (byte >> (7 - i)) & 1
            top = (crc >> 15) & 1
            crc = (crc << 1) & 0xFFFF
            if top ^ bit:
                crc ^= 0x1021
    return crc


def frame(msg_type: int, te_id: int, seq: int, payload: bytes) -> bytes:
    body = bytes([0x01, msg_type]) + te_id.to_bytes(4, "big") + seq.to_bytes(2, "big")
    body += len(payload).to_bytes(2, "big") + payload
    return b"\xAA\x55" + body + crc16_ccitt_false(body).to_bytes(2, "big")


VECTORS = {
    "heartbeat_armed_bat15": frame(0x03, 1, 1, bytes([0x01 | (15 << 4)])),
    "status_query_empty": frame(0x09, 0, 0, b""),
    "alarm_zone2_ir_ts1000": frame(0x05, 45, 7, bytes([2, 1]) + (1000).to_bytes(4, "big")),
    "register_fw1_zones8": frame(0x01, 7, 0, bytes([1, 8])),
    "control_disarm": frame(0x07, 12, 300, bytes([0x02])),
    "status_report": frame(0x0A, 0xDEADBEEF, 65535,
                           bytes([0x01 | 0x02 | (9 << 4)]) + (86400).to_bytes(4, "big")),
    "control_ack_unknown": frame(0x08, 3, 9, bytes([0xFF])),
}

if __name__ == "__main__":
    assert crc16_ccitt_false(b"") == 0xFFFF
    assert crc16_ccitt_false(b"123456789") == 0x29B1
    here = pathlib.Path(__file__).parent
    for name, data in VECTORS.items():
        (here / f"{name}.hex").write_text(data.hex(" ").upper() + "\n")
