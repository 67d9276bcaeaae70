"""routelab: a desk-scale lab for surprise-routed conditional-computation transformers.

The package provides, bottom up:

* ``tensor``      - numpy-backed float32 tensors with a reverse-mode tape
* ``transformer`` - decoder blocks, causal attention, KV caches, subset attention
* ``surprise``    - squared-distance divergence proxy, static/change surprise,
                    expected/unexpected-change signals, probabilistic-OR gate
* ``routing``     - Top-K and threshold token selection, causal routers
* ``layers``      - routed layer types (decision/dynamic pair, temporal layer,
                    depth-skip baseline) and the stacked model
* ``training``    - corpus ingestion, loss assembly, AdamW, schedules, telemetry
* ``analysis``    - analytic and measured compute/memory savings reports
* ``cli``         - train / eval / generate / analyze / savings subcommands
"""

from routelab.tensor import Tensor, Tape

__all__ = ["Tensor", "Tape"]
__version__ = "0.1.0"
