"""Self-supervised speaker verification at desk scale.

Three stages over a synthetic-speaker corpus: non-contrastive
self-distillation pretraining, iterative cosine-k-means pseudo-labeling
with AAM-softmax training, and large-margin fine-tuning; scored with
cosine similarity and EER.
"""

__version__ = "0.1.0"
