"""Keyed CSPRNG stream: AES-256 in counter mode over an all-zero plaintext"""

import secrets

import numpy as np
from Crypto.Cipher import AES

KEY_BYTES = 32

# Fixed nonce: the key alone selects the stream, so equal keys give equal triggers
_NONCE = b"pixelvei"


class KeyStream:
    """
    Deterministic cryptographically secure bit source.

    The stream is AES-256-CTR keystream bytes; bits are consumed most
    significant first, in order, never reused.
    """

    def __init__(self, key: bytes):
        if len(key) != KEY_BYTES:
            raise ValueError(f"key must be {KEY_BYTES} bytes, got {len(key)}")
        self._cipher = AES.new(key, AES.MODE_CTR, nonce=_NONCE, initial_value=0)

    def read_bytes(self, count: int) -> bytes:
        return self._cipher.encrypt(bytes(count))

    def read_bits(self, count: int) -> np.ndarray:
        """Next `count` bits as a uint8 array of 0/1"""
        raw = np.frombuffer(self.read_bytes((count + 7) // 8), dtype=np.uint8)
        return np.unpackbits(raw, bitorder="big")[:count]

    def read_signs(self, count: int) -> np.ndarray:
        """Next `count` i.i.d. uniform signs in {-1, +1} (bit 1 -> +1)"""
        return self.read_bits(count).astype(np.int8) * 2 - 1


def random_key() -> bytes:
    """Fresh key from the OS entropy pool"""
    return secrets.token_bytes(KEY_BYTES)
