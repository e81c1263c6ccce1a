"""Diffusion synthesis of Type-B aortic dissection CTA phantoms."""

__version__ = "0.1.0"
__author__ = "TBAD Synth Team"
__description__ = (
    "Class-conditioned diffusion synthesis of TBAD CTA phantoms with LoRA "
    "fine-tuning, guided sampling and evaluation"
)
