"""vibefm: multimodal vibration-sensing toolkit.

Contrastive pre-training over acoustic and seismic spectrograms with
explicit shared/private embedding subspaces, plus linear-probe fine-tuning
and a label-efficiency / domain-shift evaluation harness.
"""

__version__ = "0.1.0"
