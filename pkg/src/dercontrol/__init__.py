"""Decentralized affine control of storage and PV inverters on radial feeders.

Typical use::

    from dercontrol import assemble, synthesize_policy, compute_lower_bound, rollout
    from dercontrol.cases import desk_feeder

    sc = desk_feeder(theta=2.0)
    ls = assemble(sc)
    policy = synthesize_policy(ls, sc.disturbance)
    bound = compute_lower_bound(ls, sc.disturbance)
    batch = rollout(policy, ls, sc.disturbance, n_samples=10_000, seed=1)
"""

from .assembly import LiftedSystem, assemble
from .network import NetworkModelError, RadialNetwork, build_rx, voltage_squared
from .qp import NonConvexError, QPProblem, QPSettings, QPSolution, solve_qp
from .scenario import (AssumptionViolation, BoxSupport, DisturbanceModel, MomentMatrix, PointMass,
                       PolytopeSupport, ResourceSet, Scenario, ScenarioError, TruncatedGaussian, Uniform,
                       check_assumption1, compute_moment_matrix, sample_batch, sample_trajectory)
from .simulate import FastDisturbanceModel, TrajectoryBatch, estimate_cost_ci, fast_rollout, rollout
from .synthesis import (AffinePolicy, InfeasibleProgramError, LowerBoundResult, RobustCounterpart,
                        SynthesisError, compute_lower_bound, dualize_row, objective_value, read_policy,
                        robust_counterpart, synthesize_policy, worst_case, write_policy)

__version__ = "0.1.0"
