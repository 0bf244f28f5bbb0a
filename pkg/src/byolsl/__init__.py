"""BYOL with batch self-labeling losses on a small numpy autodiff core.

Modules:
    tensor     dense tensors with reverse-mode differentiation
    nn         layers, normalization (BN/LN/GN), weight standardization
    model      encoders, heads, online/target pair, checkpoints
    augment    stochastic view generation
    loss       BYOL, cross-cosine, cross-sigmoid, NT-Xent objectives
    data       STL10 binaries, synthetic shapes, batching
    config     flat key-value run configuration
    train      momentum SGD + EMA training loop
    evaluate   linear probe, similarity reports, accuracy curves
    gradsuite  finite-difference check cases
    cli        ``byolsl`` command
"""

__version__ = "0.1.0"
