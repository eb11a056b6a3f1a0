"""State estimation under model mismatch.

Classical Bayesian filters (KF/EKF/UKF/particle), mismatch-scenario
simulators, and a trainable gated recurrent filter whose memory and
mismatch-compensation terms are small tanh networks trained end to end
through the filter recursion.
"""

from .autodiff import Tape, grad_check
from .datasets import Trajectory, TrajectoryDataset, load_csv, save_csv, split_tags
from .filters import (GaussianBelief, ParticleBelief, ekf_step, kf_step,
                      pf_step, ukf_step, run_gaussian, run_particle)
from .gated import (ABLATION_SCHEMES, FilterRun, GateDims, GateMask,
                    GateOutputs, GateParams, MemoryState, filter_trajectory,
                    init_params, load_checkpoint, save_checkpoint)
from .linalg import (CovarianceError, ShapeError, SingularMatrixError,
                     solve_spd, symmetrize, symmetrize_psd)
from .metrics import MSE_DB_FLOOR, mse_db, rmse
from .ssm import (NominalModel, Scenario, cv_model, ct_model, linear_benchmark,
                  lorenz_benchmark, lorenz_transition, radar_benchmark, radar_h,
                  rotation2, simulate)
from .training import (TrainConfig, TrainReport, TrainingDivergedError,
                       evaluate, initial_beliefs, loss_batch, loss_trajectory,
                       train)

__version__ = "0.1.0"
