"""Multichannel meeting front-end: beamforming, dereverberation, corpus alignment and scoring."""

__version__ = "0.1.0"
