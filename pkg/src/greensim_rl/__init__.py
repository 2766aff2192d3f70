"""Trajectory-reusing policy-gradient training with Bayesian model risk.

Subpackage map:

* :mod:`~greensim_rl.core` -- decision-process primitives and contracts.
* :mod:`~greensim_rl.bioenv` -- the chromatography purification MDP and
  its upstream fermentation simulator.
* :mod:`~greensim_rl.bayes` -- posterior over the transition model.
* :mod:`~greensim_rl.policy` -- linear-softmax and MLP policies.
* :mod:`~greensim_rl.estimators` -- PG/ILR/MLR/TLR gradient estimators.
* :mod:`~greensim_rl.oracle` -- exact enumeration ground truth.
* :mod:`~greensim_rl.trainer` -- the online training loop.
* :mod:`~greensim_rl.harness` -- macro-replication experiment protocol.
* :mod:`~greensim_rl.cli` -- the ``greensim`` command.
"""

__version__ = "0.1.0"
