"""Flow-matching video-to-audio synthesis with a frame-aligned synchronisation module."""
__version__ = "0.1.0"
