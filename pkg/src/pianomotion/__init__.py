"""Tools for MIDI-consistent 3D piano-playing hand motion.

Subpackages cover Standard MIDI File ingestion and quantization, the 88-key
keyboard geometry, an articulated two-hand skeleton, multi-view keypoint
reconstruction, MIDI-driven motion refinement, music-based motion retrieval,
key-press metrics, and the reward/observation signals used to train
key-pressing control policies.
"""

__version__ = "0.1.0"
