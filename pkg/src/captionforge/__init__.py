"""captionforge: encoder-decoder caption models over precomputed video features.

Subpackages cover the full desk-scale pipeline: tensor math with autodiff
(`numerics`), attention blocks (`attention`), transformer assemblies
(`model`), feature files and PCA (`features`), caption corpora (`corpus`),
training (`training`), generation (`decoding`), BLEU scoring (`evaluation`),
the frame-attention attribute head (`attributes`), and the CLI (`cli`).
"""

__version__ = "0.1.0"
