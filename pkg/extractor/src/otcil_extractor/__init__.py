"""Bundle producer for the otcil engine.

Fulfills an attribute_requests.json: encodes every image under the class
directories, asks a language-model backend for per-class visual attributes,
encodes the texts, and writes an embedding bundle the engine loads as-is.
The two packages share nothing but the file formats.
"""

__version__ = "0.1.0"
