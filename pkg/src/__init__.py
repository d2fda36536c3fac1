"""
Reduced-density-matrix hierarchy simulator source package
"""
