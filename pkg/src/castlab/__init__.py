"""N:M sparse training on a small float64 autodiff engine.

Modules: ``tensor`` (reverse-mode engine), ``sparsity`` (masks and mask
statistics), ``optim`` (AdamS and baseline update rules), ``scaling``
(group-wise weight scaling), ``nn`` (model families and losses), ``trainer``
(pipelines and probes), ``scalinglaw`` (token scaling-law fits), ``checkpoint``
(binary format), ``config`` and ``cli``.
"""

__version__ = "0.1.0"
