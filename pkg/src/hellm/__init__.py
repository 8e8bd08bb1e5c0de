"""Desk-scale Greek language-model pipeline.

Corpus normalization, BPE vocabulary training, MLM/NSP pre-training data
and models, task fine-tuning (PoS, NER, NLI), word-embedding baselines,
pseudo-perplexity corpus denoising, and evaluation metrics, all built on a
small reverse-mode tensor engine.
"""

__version__ = "0.1.0"
