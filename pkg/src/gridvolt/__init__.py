"""Synthetic distribution substations and voltage estimation under partial observability.

The package has three legs:

* a feeder synthesizer plus a backward-forward sweep power-flow solver that
  produces time series of ground-truth bus-phase voltages (``simulation``),
* a small reverse-mode tensor engine (``autodiff``) and a physics-biased
  graph network built on it (``model``, ``losses``),
* training with an observability curriculum and an evaluation harness with
  baselines, observability sweeps, and measurement-attack studies
  (``training``, ``evaluation``), all wired together by a CLI (``cli``).
"""

__version__ = "0.1.0"
