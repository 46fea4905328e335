"""Latent-space 3D shape editing through a trainable diffusion autoencoder.

Subpackages cover procedural shape synthesis (:mod:`shapesculpt.shapegen`),
wavelet compression of distance volumes (:mod:`shapesculpt.wavelet`), the
reverse-mode tensor engine (:mod:`shapesculpt.autodiff`), the denoising
network and its training loop (:mod:`shapesculpt.network`,
:mod:`shapesculpt.diffusion`), the latent-code/feature-volume state that
edits act on (:mod:`shapesculpt.coupling`), the editing operators
(:mod:`shapesculpt.editops`), the latent optimizer (:mod:`shapesculpt.optimize`),
mesh extraction and metrics (:mod:`shapesculpt.mesh`), and the command-line
pipeline (:mod:`shapesculpt.cli`).
"""

__version__ = "0.1.0"
