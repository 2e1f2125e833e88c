"""
Degradation-aware conditional super-resolution on a desk

Synthetic real-world degradation, tag-similarity severity scoring, a
Mamba-style conditional super-resolution network, and a LoRA-tuned embedding
extractor, all runnable offline on a CPU.
"""

__version__ = "0.1.0.dev1"
__author__ = "John Thorvald Wodder II"
__author_email__ = "dacesr@varonathe.org"
__license__ = "MIT"
__url__ = "https://github.com/jwodder/dacesr"
