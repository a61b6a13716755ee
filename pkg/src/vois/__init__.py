"""Target-conditioned video object segmentation, end to end on numpy.

Subpackage map:

- tensor: reverse-mode autodiff core
- nn: parameterized modules (linear, layer norm, attention)
- backbone: dual-path hierarchical windowed-attention encoder
- decoder: query-based transformer decoder over space-time memory
- heads / losses: prediction heads, sequence matching, training loss
- metrics: mask-sequence AP/AR, RLE, significance testing
- data: synthetic moving-shapes benchmark generator
- train / cli: training loop, evaluation, command line entry points
"""

__version__ = "0.1.0"
