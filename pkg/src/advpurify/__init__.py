"""advpurify: L-inf adversarial attack benchmark with diffusion purification.

Generates FGSM/PGD adversarial examples against small image classifiers
under white-box and black-box threat models, defends by partially noising
inputs and denoising them back with a learned diffusion model, and
reports the attack-success-rate grid.
"""

__version__ = "0.1.0"
