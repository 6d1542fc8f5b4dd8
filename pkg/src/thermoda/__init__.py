"""
Data assimilation and flow-reversal forecasting for a chaotic
thermosyphon: a finite-volume loop as the nature run, the reduced
three-variable EM model synchronized to scalar mass-flow observations by
3D-Var, EKF, EnSRF and ETKF, bred vectors, reversal predictors, forecast
verification and multiple-shooting calibration.
"""

__version__ = "0.1.0"

from .models import EmParams, em_forecast, em_jacobian, em_rhs, h_transfer, rk4_step  # noqa: E402,F401
from .nature import LoopConfig, TruthSeries, simulate_truth  # noqa: E402,F401
from .filters import FilterConfig  # noqa: E402,F401
from .experiment import run_experiment  # noqa: E402,F401
