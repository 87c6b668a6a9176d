"""lamlab: a desk-scale laboratory for latent action models with an additive
composition prior.

Subpackages: autodiff (reverse-mode engine), world (synthetic 2-D tabletop),
data_io (dataset/checkpoint binary formats), sampling (pair/triple samplers),
model (IDM / vector-quantizer / FDM and losses), training (optimizer + loop),
metrics and probes (structured-latent evaluation), cli (command line).
"""

__version__ = "0.1.0"
