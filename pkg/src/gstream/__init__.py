"""Keypoint-driven Gaussian streaming: compact free-viewpoint video at desk scale.

A dynamic scene is a set of 3D Gaussians. Frame 0 is transmitted once; each
later frame is either a motion frame (a handful of keypoints, 14 floats each,
drive the Gaussians inside their learned influence fields) or a key frame
(a learned sparse mask selects the Gaussians whose attribute residuals are
corrected). Payloads are quantized, entropy coded and framed into a `.cgs`
stream that a receiver decodes frame by frame, bit-exactly in lockstep with
the encoder's own decoder model.
"""

__version__ = "0.1.0"
