import struct

import numpy as np
import pytest

from uatr.audio import AudioBuffer


def make_wav_bytes(samples: np.ndarray, rate: int = 16000,
                   fmt: str = "pcm16") -> bytes:
    """Hand-built RIFF/WAVE bytes; samples may be (n,) mono or (n, 2) stereo."""
    samples = np.atleast_2d(samples.T).T if samples.ndim == 1 else samples
    channels = samples.shape[1] if samples.ndim == 2 else 1
    flat = samples.reshape(-1)
    if fmt == "pcm16":
        payload = np.clip(np.rint(flat * 32768), -32768, 32767).astype("<i2").tobytes()
        code, bits = 1, 16
    elif fmt == "float32":
        payload = flat.astype("<f4").tobytes()
        code, bits = 3, 32
    elif fmt == "pcm8":  # deliberately unsupported by the reader
        payload = ((flat * 127 + 128).astype("u1")).tobytes()
        code, bits = 1, 8
    else:
        raise ValueError(fmt)
    block = channels * bits // 8
    fmt_chunk = struct.pack("<HHIIHH", code, channels, rate, rate * block,
                            block, bits)
    body = (b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
            + b"data" + struct.pack("<I", len(payload)) + payload)
    return b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body


def tone(freq: float, seconds: float = 1.0, rate: int = 16000,
         amp: float = 0.5) -> AudioBuffer:
    t = np.arange(int(round(seconds * rate))) / rate
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), rate)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
