"""Knowledge-aware text VQA engine.

Links visual text found in an image to a knowledge-base entity, retrieves
the entity's facts, and asks an external multimodal model for an answer
together with the supporting fact.
"""

__version__ = "0.1.0"
