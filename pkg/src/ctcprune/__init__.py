"""On-demand depth pruning for Transformer-CTC sequence models.

Train one encoder with intermediate CTC taps and stochastic depth, then
induce smaller sub-models of any depth at run time without fine-tuning.
Includes SVCCA tooling for analyzing why layer removal is safe, a greedy
depth-by-depth search over layer subsets, and a depth-vs-throughput
benchmark.
"""

__version__ = "0.1.0"
