"""Few-shot image classification with query-specific region-level prototypes.

The package bundles a small float64 autodiff core (``tensor``), a Conv-4
embedding with channel/spatial attention, a multi-scale cell
representation, a non-parametric query-specific prototype generator, a
relation-map classifier, and an episodic training/evaluation harness with
a synthetic dataset generator and CLI.
"""

__version__ = "0.1.0"
