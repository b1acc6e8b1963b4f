"""OCR sidecar service: classical scene-text backends behind the /ocr contract."""

__version__ = "0.1.0"
