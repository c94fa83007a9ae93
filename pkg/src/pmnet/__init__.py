"""Pathloss-map prediction workbench.

Submodules:
  geo          -- obstacle rasters, procedural maps, line of sight
  propagation  -- 3GPP urban-micro and ray-launch ground-truth generators
  dataset      -- gray conversion, infill, augmentation, splits, sample I/O
  model        -- the encoder-decoder network and atrous convolution
  train        -- training loop and transfer-learning harness
  metrics      -- task metrics, reports, and heatmap rendering
  workbench    -- dataset building and the shared prediction path
  server       -- coverage-explorer HTTP service
  cli          -- command-line entry points
"""

__version__ = "0.1.0"
