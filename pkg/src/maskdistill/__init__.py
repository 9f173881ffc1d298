"""Query-access-only saliency explanations for black-box classifiers.

The toolkit trains a small mask-generation network jointly with a student
network that distills the black-box's local behavior on perturbed inputs;
the learned mask is the explanation. RISE, LIME and occlusion baselines
share the same perturbation and black-box plumbing, and an evaluation
harness scores everything with IoU and deletion-AUC metrics.
"""

__version__ = "0.1.0"
