"""JSON wire helpers: base64 float32 vectors, decimal-string ids, envelopes."""

from __future__ import annotations

import base64

import numpy as np


def encode_f32(arr: np.ndarray) -> str:
    return base64.b64encode(np.asarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_f32(text: str, expect: int | None = None) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(text), dtype="<f4").astype(np.float32)
    if expect is not None and arr.shape[0] != expect:
        raise ValueError(f"vector has {arr.shape[0]} dims, expected {expect}")
    return arr


def encode_u8(arr: np.ndarray) -> str:
    return base64.b64encode(np.asarray(arr, dtype=np.uint8).tobytes()).decode("ascii")


def decode_u8(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy()


def encode_bytes(blob: bytes) -> str:
    return base64.b64encode(blob).decode("ascii")


def decode_bytes(text: str) -> bytes:
    return base64.b64decode(text)


def ids_to_wire(ids) -> list[str]:
    return [str(int(v)) for v in np.atleast_1d(np.asarray(ids))]


def ids_from_wire(items: list[str]) -> np.ndarray:
    return np.array([int(v) for v in items], dtype=np.int64)


def ok(payload: dict) -> dict:
    return {"status": "ok", "payload": payload}


def err(code: str, msg: str) -> dict:
    return {"status": "error", "error": {"code": code, "msg": msg}}
