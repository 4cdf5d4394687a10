"""xbarlab: desk-scale co-design simulator for neural networks on RRAM crossbars.

Subpackages:
  nn          minimal dense NN engine (forward/backprop/SGD, masks)
  device      RRAM cell model: quantization, write variation, stuck faults
  crossbar    programmed arrays, read MVM, R-V-W loop, write-cost accounting
  rsa         random sparse adaptation on frozen faulty crossbars
  smallworld  small-world metrics, sparse init, threshold pruning pipeline
  cgap        continuous growth-and-pruning structural training
  data        IDX / CIFAR-10 loaders and the offline synthetic corpus
  experiments experiment configs, deterministic runs, persistence
  report      tidy CSV exports and rendered figures
"""

__version__ = "0.1.0"
