"""Numerical core: tensor trains, sampling, cost model, optimizer, QTT grids and rendering."""
