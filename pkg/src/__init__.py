"""
Gradus QR v1.0 - Rewriting Difficulty Toolkit
Source package: metrics, corpus handling, adapter models, ensembles and experiment drivers
"""
