"""flowmaplab: a desk-scale laboratory for flow matching and flow maps.

Train a velocity-field model on 2-D toy distributions, re-wire it into
a flow map whose decoder is conditioned on the jump target, fine-tune
it on average-velocity targets, and compare few-step samplers against
closed-form oracles.
"""

__version__ = "0.1.0"
