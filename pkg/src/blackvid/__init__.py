"""Black-box video domain adaptation on precomputed frame features.

Train a source sequence classifier, expose it only as a prediction API, and
adapt a fresh target model by distilling those predictions while regularizing
clip and temporal features for consistency.
"""

__version__ = "0.1.0"
