# fedfraud - federated fraud detection with Shapley explanations
__version__ = "1.0.0"
