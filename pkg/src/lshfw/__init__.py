"""LSH-accelerated conditional gradient methods.

Modules:
    vecspace: datasets, hull geometry and seeded randomness.
    lsh: multi-table locality sensitive hashing on the unit sphere.
    maxip: asymmetric transforms, the MaxIP index and the query quantizer.
    fw: Frank-Wolfe and Herding solvers plus convergence certification.
    acmdp: action-constrained MDPs and Frank-Wolfe policy optimization.
    oracle: brute-force references.
    cli: the ``lshfw`` command.
"""

__version__ = "0.1.0"
