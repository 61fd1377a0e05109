"""Two-phase unsupervised clustering GAN.

Phase 1 learns a categorical prior over the data by regularized information
maximization with self-augmented consistency (adversarial perturbations and,
for images, random affine distortion). Phase 2 trains a generator,
Wasserstein critic and clustering encoder against that prior, with cyclic,
reconstruction, prior-bounded and cross-modality losses. Evaluation reports
Hungarian-matched accuracy, normalized mutual information and mode coverage.
"""

__version__ = "0.1.0"
