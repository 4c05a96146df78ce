"""Environmental sound deepfake detection toolkit.

Spectrogram frontends, a small numpy autodiff engine, a convolutional
detector with an MLP head, the three-stage training recipe, and an
evaluation harness producing scene/event/cross-test reports.
"""

__version__ = "0.1.0"

SAMPLE_RATE = 16000
CLIP_SECONDS = 4
