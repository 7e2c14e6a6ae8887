import os

import numpy as np
import pytest

from meetbeam.lib.audio import AudioClip, write_audio
from meetbeam.modules.mixgen import speech_like

SR = 16000


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def speech(rng):
    """Two seconds of bursty speech-like signal."""
    return AudioClip(speech_like(2 * SR, SR, rng), SR)


@pytest.fixture
def wav_writer(tmp_path):
    def _write(name, samples, encoding="float32", sample_rate=SR):
        path = os.path.join(str(tmp_path), name)
        write_audio(AudioClip(samples, sample_rate), path, encoding)
        return path

    return _write

