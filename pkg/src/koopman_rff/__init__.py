"""Koopman operator approximation with learnable random Fourier features.

Library layout:

- ``dynamics``: benchmark flows (Duffing, double gyre, Bickley jet), ODE
  integrators, grid sampling, snapshot datasets, persistence.
- ``dictionary``: RFF feature maps with parameter gradients, fixed Gaussian
  and monomial baselines, RBF Gram matrices.
- ``koopman``: operator estimation, scaled eigendecomposition, trajectory
  reconstruction, kernel EDMD.
- ``learning``: joint dictionary/operator training, batch and online.
- ``metrics``: prediction and eigenfunction-invariance errors, NT/LT sweep.
- ``cli``: experiment runner (``koopman-rff run|compare|export-field``).
"""

__version__ = "0.1.0"

from .dictionary import (GaussianGridDictionary, MonomialDictionary,
                         RffDictionary, fixed_eval, kernel_gram, rff_eval,
                         rff_grad, rff_init)
from .dynamics import (BickleyJetParams, DoubleGyreParams, DuffingParams,
                       EnsembleTrajectory, IntegrationError, SnapshotDataset,
                       Trajectory, bickley_vf, double_gyre_vf, duffing_vf,
                       integrate_abm, integrate_rk45, make_snapshots,
                       sample_grid, simulate_ensemble)
from .koopman import (EigenfunctionField, KernelEdmdResult, KoopmanModel,
                      eig_scaled, eigenfunction_field, estimate_koopman,
                      fit_B, kernel_edmd, reconstruct, reconstruct_series)
from .learning import (TrainConfig, TrainState, TrainingDiverged, fit,
                       init_train_state, loss, online_ingest)
from .metrics import (EigenErrorReport, PredictionReport, eigfunc_error,
                      evaluate_nt_lt, sign_agreement, traj_error)

__all__ = [name for name in dir() if not name.startswith("_")]
