"""Part-based Gaussian shape templates fitted to heatmaps by gradient descent."""
