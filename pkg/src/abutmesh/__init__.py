"""abutmesh: remesh oral-scan-style triangle meshes into ordered patches,
pretrain a masked-autoencoder mesh transformer, fine-tune a text-conditioned
regressor for three abutment parameters, and evaluate with an interval-IoU
metric."""

__version__ = "0.1.0"
