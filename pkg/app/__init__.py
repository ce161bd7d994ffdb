# SpecSplat Package
# This package provides dynamic specular Gaussian splatting: synthetic data, rendering, training and evaluation
