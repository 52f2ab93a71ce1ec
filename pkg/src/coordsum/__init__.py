"""coordsum: a desk-scale laboratory for coordination-trained abstractive summarization.

Pipeline stages: synthetic/plain-text corpora -> MLE training of a small
encoder-decoder -> diverse-beam candidate generation -> contrastive
(rank-margin) fine-tuning -> reranking and analysis reports.
"""

__version__ = "0.1.0"
